//! 2HashDH oblivious PRF over ristretto255.
//!
//! The client hashes its verification input to a group element, blinds it
//! with a fresh scalar, and sends only the blinded element; the server
//! multiplies by its PRF key and returns the result; the client unblinds and
//! hashes to the 32-byte output `y = F_k(x ∥ label)`. The server never sees
//! `x` (fresh blinds make transcripts unlinkable) and the client never
//! learns `k`.
//!
//! Evaluation is unverified: a server evaluating under the wrong key yields
//! a wrong `y`, which surfaces downstream as a store decryption failure, not
//! silent compromise. The server enforces a per-caller rate limit so the
//! PRF can only be queried as an online, bounded oracle.

use curve25519_dalek::constants::RISTRETTO_BASEPOINT_POINT;
use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoPoint};
use curve25519_dalek::scalar::Scalar;
use curve25519_dalek::traits::Identity;
use rand::rngs::OsRng;
use rand::RngCore;
use sha2::{Digest, Sha256, Sha512};
use zeroize::Zeroizing;

use crate::clock::Clock;
use crate::ratelimit::{RateLimitConfig, RateLimiter};
use crate::soft_token::TokenError;
use crate::stretch::StretchParams;

const DST_HASH_TO_GROUP: &[u8] = b"vfa/oprf/h2g/v1";
const DST_INPUT: &[u8] = b"vfa/oprf/input/v1";
const DST_FINAL: &[u8] = b"vfa/oprf/final/v1";
const DST_KEY_ID: &[u8] = b"vfa/oprf/key-id/v1";

#[derive(Debug, thiserror::Error)]
pub enum OprfError {
    #[error("invalid group element (malformed encoding or identity)")]
    InvalidElement,
    #[error("rate limited")]
    RateLimited,
    #[error("blind state already consumed")]
    StateConsumed,
    #[error("OPRF key id mismatch (store expects {expected}, server has {got})")]
    WrongKeyId { expected: String, got: String },
    #[error("OPRF server unavailable: {0}")]
    Unavailable(String),
}

/// The server's PRF key. `key_id` is derived from the public point so the
/// same key always advertises the same id.
pub struct OprfServerKey {
    k: Scalar,
    key_id: [u8; 8],
}

impl OprfServerKey {
    pub fn generate(rng: &mut (impl RngCore + rand::CryptoRng)) -> Self {
        let k = random_nonzero_scalar(rng);
        Self { key_id: key_id_for(&k), k }
    }

    /// Rebuild from a canonical 32-byte scalar encoding.
    pub fn from_scalar_bytes(bytes: &[u8; 32]) -> Result<Self, OprfError> {
        let k: Option<Scalar> = Scalar::from_canonical_bytes(*bytes).into();
        let k = k.ok_or(OprfError::InvalidElement)?;
        if k == Scalar::ZERO {
            return Err(OprfError::InvalidElement);
        }
        Ok(Self { key_id: key_id_for(&k), k })
    }

    pub fn scalar_bytes(&self) -> [u8; 32] {
        self.k.to_bytes()
    }

    pub fn key_id(&self) -> [u8; 8] {
        self.key_id
    }
}

fn key_id_for(k: &Scalar) -> [u8; 8] {
    let public = (k * RISTRETTO_BASEPOINT_POINT).compress();
    let digest = Sha256::new()
        .chain_update(DST_KEY_ID)
        .chain_update(public.as_bytes())
        .finalize();
    digest[..8].try_into().unwrap()
}

fn random_nonzero_scalar(rng: &mut (impl RngCore + rand::CryptoRng)) -> Scalar {
    loop {
        let mut wide = [0u8; 64];
        rng.fill_bytes(&mut wide);
        let s = Scalar::from_bytes_mod_order_wide(&wide);
        if s != Scalar::ZERO {
            return s;
        }
    }
}

/// PIN-derived OPRF input: `x = Argon2id(pin, salt = store_id)`.
pub struct VerificationInput {
    bytes: Zeroizing<[u8; 32]>,
}

impl VerificationInput {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.bytes
    }
}

pub fn derive_verification_input(
    pin: &str,
    store_id: &[u8; 16],
    stretch: &StretchParams,
) -> Result<VerificationInput, TokenError> {
    let bytes = stretch.stretch(pin.as_bytes(), store_id)?;
    Ok(VerificationInput { bytes })
}

/// Canonical 32-byte encoding of a blinded group element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlindedElement(pub [u8; 32]);

/// Canonical 32-byte encoding of the server-evaluated element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvaluatedElement(pub [u8; 32]);

/// Client state between blind and finalize. Single-use.
pub struct BlindState {
    r: Scalar,
    input_hash: [u8; 32],
    consumed: bool,
}

/// The PRF output `y`, fed into the hardened master-key derivation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OprfOutput([u8; 32]);

impl OprfOutput {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }
}

fn hash_to_group(x: &VerificationInput, label: &[u8]) -> RistrettoPoint {
    let digest = Sha512::new()
        .chain_update(DST_HASH_TO_GROUP)
        .chain_update(x.as_bytes())
        .chain_update(label)
        .finalize();
    RistrettoPoint::from_uniform_bytes(&digest.into())
}

fn input_hash(x: &VerificationInput, label: &[u8]) -> [u8; 32] {
    Sha256::new()
        .chain_update(DST_INPUT)
        .chain_update(x.as_bytes())
        .chain_update(label)
        .finalize()
        .into()
}

fn output_hash(input_hash: &[u8; 32], element: &RistrettoPoint) -> OprfOutput {
    let digest = Sha256::new()
        .chain_update(DST_FINAL)
        .chain_update(input_hash)
        .chain_update(element.compress().as_bytes())
        .finalize();
    OprfOutput(digest.into())
}

/// Blind `x ∥ label` with a fresh scalar. Two blinds of the same input
/// produce unrelated wire elements.
pub fn oprf_blind(
    x: &VerificationInput,
    label: &[u8],
    rng: &mut (impl RngCore + rand::CryptoRng),
) -> (BlindedElement, BlindState) {
    let r = random_nonzero_scalar(rng);
    let blinded = r * hash_to_group(x, label);
    (
        BlindedElement(blinded.compress().to_bytes()),
        BlindState { r, input_hash: input_hash(x, label), consumed: false },
    )
}

fn decode_element(bytes: &[u8; 32]) -> Result<RistrettoPoint, OprfError> {
    let point = CompressedRistretto(*bytes)
        .decompress()
        .ok_or(OprfError::InvalidElement)?;
    if point == RistrettoPoint::identity() {
        return Err(OprfError::InvalidElement);
    }
    Ok(point)
}

/// Unblind the server's answer and hash to the PRF output. Consumes the
/// blind state; a second call fails.
pub fn oprf_finalize(
    state: &mut BlindState,
    eval: &EvaluatedElement,
) -> Result<OprfOutput, OprfError> {
    if state.consumed {
        return Err(OprfError::StateConsumed);
    }
    let element = decode_element(&eval.0)?;
    state.consumed = true;
    let unblinded = state.r.invert() * element;
    Ok(output_hash(&state.input_hash, &unblinded))
}

/// Direct evaluation oracle: computes `F_k(x ∥ label)` without the blinding
/// round. Test oracle and offline-adversary model; never wired to any
/// transport.
pub fn oprf_direct(key: &OprfServerKey, x: &VerificationInput, label: &[u8]) -> OprfOutput {
    let element = key.k * hash_to_group(x, label);
    output_hash(&input_hash(x, label), &element)
}

/// The OPRF evaluation service: a PRF key plus a per-caller rate limiter.
pub struct OprfServer {
    key: OprfServerKey,
    limiter: RateLimiter,
    log: std::sync::Mutex<Vec<(String, u64)>>,
    clock: Clock,
}

impl OprfServer {
    pub fn new(key: OprfServerKey, limit: RateLimitConfig, clock: Clock) -> Self {
        Self {
            key,
            limiter: RateLimiter::new(limit, clock.clone()),
            log: std::sync::Mutex::new(Vec::new()),
            clock,
        }
    }

    pub fn key_id(&self) -> [u8; 8] {
        self.key.key_id
    }

    /// Evaluate a blinded element. Rejects malformed or identity elements
    /// and enforces the per-caller limit before touching the key.
    pub fn evaluate(
        &self,
        caller: &str,
        key_id: [u8; 8],
        elem: &BlindedElement,
    ) -> Result<EvaluatedElement, OprfError> {
        if key_id != self.key.key_id {
            return Err(OprfError::WrongKeyId {
                expected: hex::encode(key_id),
                got: hex::encode(self.key.key_id),
            });
        }
        if !self.limiter.allow(caller) {
            return Err(OprfError::RateLimited);
        }
        let point = decode_element(&elem.0)?;
        self.log
            .lock()
            .expect("oprf log poisoned")
            .push((caller.to_string(), self.clock.now_ms()));
        let evaluated = self.key.k * point;
        Ok(EvaluatedElement(evaluated.compress().to_bytes()))
    }

    /// The only thing the server retains about callers: id and timestamp.
    pub fn access_log(&self) -> Vec<(String, u64)> {
        self.log.lock().expect("oprf log poisoned").clone()
    }
}

/// Client-side view of an OPRF service, independent of transport.
pub trait OprfEvaluator {
    fn evaluate(
        &self,
        key_id: [u8; 8],
        elem: &BlindedElement,
    ) -> Result<EvaluatedElement, OprfError>;

    /// Which key the service currently evaluates under; recorded in
    /// hardened stores at enrollment.
    fn server_key_id(&self) -> Result<[u8; 8], OprfError>;
}

/// In-process transport for deterministic tests and demos.
pub struct InProcessOprf {
    pub server: std::sync::Arc<OprfServer>,
    pub caller: String,
}

impl OprfEvaluator for InProcessOprf {
    fn evaluate(
        &self,
        key_id: [u8; 8],
        elem: &BlindedElement,
    ) -> Result<EvaluatedElement, OprfError> {
        self.server.evaluate(&self.caller, key_id, elem)
    }

    fn server_key_id(&self) -> Result<[u8; 8], OprfError> {
        Ok(self.server.key_id())
    }
}

/// Full client flow: blind, evaluate over the given transport, finalize.
pub fn run_client(
    evaluator: &dyn OprfEvaluator,
    x: &VerificationInput,
    label: &[u8],
    key_id: [u8; 8],
) -> Result<OprfOutput, OprfError> {
    let (blinded, mut state) = oprf_blind(x, label, &mut OsRng);
    let evaluated = evaluator.evaluate(key_id, &blinded)?;
    oprf_finalize(&mut state, &evaluated)
}
