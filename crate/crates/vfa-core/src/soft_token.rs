//! Software emulation of a PKCS#11-style e-signature token.
//!
//! The token holds a non-exportable 2048-bit RSA signing key (deterministic
//! PKCS#1 v1.5 with SHA-256) and a non-exportable AES-256 wrapping key. All
//! privileged operations require an authenticated session obtained with the
//! PIN; three consecutive failures lock the token until PUK recovery.
//!
//! Token keys are derived from a caller-supplied 32-byte seed, so a second
//! device can instantiate the identical token from the same seed — the
//! software stand-in for plugging the same physical token into another
//! machine.
//!
//! At rest the token serializes to a `VFAT` file whose private material is
//! AEAD-sealed under keys stretched from the PIN and the PUK (Argon2id, see
//! [`StretchParams`]). The serialized form never contains plaintext key bytes.

use aes_gcm::aead::{Aead, Payload};
use aes_gcm::{Aes256Gcm, Key, KeyInit, Nonce};
use hkdf::Hkdf;
use rand::rngs::OsRng;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rsa::pkcs8::{DecodePrivateKey, EncodePrivateKey, EncodePublicKey};
use rsa::{Pkcs1v15Sign, RsaPrivateKey, RsaPublicKey};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use subtle::ConstantTimeEq;
use zeroize::{Zeroize, Zeroizing};

use crate::stretch::StretchParams;

pub const TOKEN_MAGIC: &[u8; 4] = b"VFAT";
pub const TOKEN_FORMAT_VERSION: u8 = 0x01;
pub const MAX_PIN_RETRIES: u8 = 3;

const RSA_BITS: usize = 2048;
const WRAP_NONCE_LEN: usize = 12;
const WRAP_TAG_LEN: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum TokenError {
    #[error("invalid PIN or PUK format")]
    InvalidPinFormat,
    #[error("wrong PIN ({retries_remaining} retries remaining)")]
    WrongPin { retries_remaining: u8 },
    #[error("token is locked")]
    TokenLocked,
    #[error("token is not locked")]
    NotLocked,
    #[error("wrong PUK")]
    WrongPuk,
    #[error("session is not authenticated for this token")]
    SessionNotAuthenticated,
    #[error("key unwrap failed (wrong token or tampered blob)")]
    UnwrapFailed,
    #[error("unsupported KDF parameters")]
    InvalidKdfParams,
    #[error("corrupt token file: {0}")]
    CorruptToken(String),
    #[error("token signing failed")]
    SignFailed,
}

/// Signature algorithms the token can perform. Deterministic EdDSA would be
/// an alternative behind the same interface; only RSA is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignatureAlgorithm {
    DeterministicRsaPkcs1v15Sha256,
}

/// A deterministic signature: byte-identical for a fixed token and digest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSignature {
    pub sigma: Vec<u8>,
    pub algorithm: SignatureAlgorithm,
}

/// Authenticated ciphertext of a 32-byte key, bound to the producing token.
/// Layout: 12-byte nonce ∥ AES-256-GCM ciphertext+tag, AAD = token_id ∥ 0x01.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WrappedBlob(pub Vec<u8>);

/// PIN/PUK verification state.
#[derive(Debug, Clone)]
pub struct PinState {
    pin: Verifier,
    puk: Verifier,
    retries_remaining: u8,
    locked: bool,
}

impl PinState {
    pub fn retries_remaining(&self) -> u8 {
        self.retries_remaining
    }

    pub fn locked(&self) -> bool {
        self.locked
    }
}

#[derive(Debug, Clone)]
struct Verifier {
    salt: [u8; 16],
    hash: [u8; 32],
}

impl Verifier {
    fn new(secret: &str, salt: [u8; 16], stretch: &StretchParams) -> Result<Self, TokenError> {
        let hash = stretch.stretch(secret.as_bytes(), &salt)?;
        Ok(Self { salt, hash: *hash })
    }

    fn matches(&self, secret: &str, stretch: &StretchParams) -> Result<bool, TokenError> {
        let candidate = stretch.stretch(secret.as_bytes(), &self.salt)?;
        Ok(candidate.ct_eq(&self.hash).into())
    }
}

/// AEAD envelope over the token's private material, keyed by a stretched
/// PIN or PUK.
#[derive(Debug, Clone)]
struct SealedEnvelope {
    salt: [u8; 16],
    nonce: [u8; 12],
    ciphertext: Vec<u8>,
}

#[derive(Clone)]
struct TokenSecrets {
    signing_key: RsaPrivateKey,
    wrapping_key: Zeroizing<[u8; 32]>,
}

/// Handle to an open token session. Privileged operations check that the
/// session is authenticated and belongs to the token they are invoked on.
#[derive(Debug, Clone)]
pub struct TokenSession {
    token_id: [u8; 16],
    authenticated: bool,
    opened_at: std::time::Instant,
}

impl TokenSession {
    pub fn authenticated(&self) -> bool {
        self.authenticated
    }

    pub fn opened_at(&self) -> std::time::Instant {
        self.opened_at
    }
}

/// The software token. All state mutation happens through PIN verification;
/// operations on one handle must be externally serialized.
#[derive(Clone)]
pub struct TokenHandle {
    token_id: [u8; 16],
    stretch: StretchParams,
    pin_state: PinState,
    pin_env: SealedEnvelope,
    puk_env: SealedEnvelope,
    /// `None` while the token is loaded from disk and no PIN/PUK operation
    /// has unsealed the private material yet.
    secrets: Option<TokenSecrets>,
}

fn valid_pin(pin: &str) -> bool {
    (4..=12).contains(&pin.len()) && pin.is_ascii()
}

fn valid_puk(puk: &str) -> bool {
    (8..=16).contains(&puk.len()) && puk.is_ascii()
}

fn hkdf_expand(seed: &[u8; 32], info: &[u8], out: &mut [u8]) {
    Hkdf::<Sha256>::new(None, seed)
        .expand(info, out)
        .expect("output length fits HKDF bounds");
}

fn envelope_aad(token_id: &[u8; 16]) -> Vec<u8> {
    let mut aad = Vec::with_capacity(21);
    aad.extend_from_slice(TOKEN_MAGIC);
    aad.push(TOKEN_FORMAT_VERSION);
    aad.extend_from_slice(token_id);
    aad
}

fn seal_envelope(
    secret: &str,
    salt: [u8; 16],
    nonce: [u8; 12],
    payload: &[u8],
    aad: &[u8],
    stretch: &StretchParams,
) -> Result<SealedEnvelope, TokenError> {
    let key = stretch.stretch(secret.as_bytes(), &salt)?;
    let cipher = Aes256Gcm::new(&Key::<Aes256Gcm>::from(*key));
    let ciphertext = cipher
        .encrypt(&Nonce::from(nonce), Payload { msg: payload, aad })
        .map_err(|_| TokenError::SignFailed)?;
    Ok(SealedEnvelope { salt, nonce, ciphertext })
}

fn open_envelope(
    env: &SealedEnvelope,
    secret: &str,
    aad: &[u8],
    stretch: &StretchParams,
) -> Result<Zeroizing<Vec<u8>>, TokenError> {
    let key = stretch.stretch(secret.as_bytes(), &env.salt)?;
    let cipher = Aes256Gcm::new(&Key::<Aes256Gcm>::from(*key));
    cipher
        .decrypt(
            &Nonce::from(env.nonce),
            Payload { msg: &env.ciphertext, aad },
        )
        .map(Zeroizing::new)
        .map_err(|_| TokenError::CorruptToken("sealed envelope failed authentication".into()))
}

/// CBOR layout of the secret payload inside the sealed envelopes.
#[derive(Serialize, Deserialize)]
struct SecretPayload {
    #[serde(with = "serde_bytes")]
    rsa_pkcs8: Vec<u8>,
    #[serde(with = "serde_bytes")]
    wrap_key: Vec<u8>,
}

impl TokenSecrets {
    fn to_payload(&self) -> Result<Zeroizing<Vec<u8>>, TokenError> {
        let der = self
            .signing_key
            .to_pkcs8_der()
            .map_err(|_| TokenError::SignFailed)?;
        let payload = SecretPayload {
            rsa_pkcs8: der.as_bytes().to_vec(),
            wrap_key: self.wrapping_key.to_vec(),
        };
        let mut buf = Vec::new();
        ciborium::into_writer(&payload, &mut buf).expect("CBOR to vec cannot fail");
        Ok(Zeroizing::new(buf))
    }

    fn from_payload(bytes: &[u8]) -> Result<Self, TokenError> {
        let mut payload: SecretPayload = ciborium::from_reader(bytes)
            .map_err(|_| TokenError::CorruptToken("bad secret payload".into()))?;
        let signing_key = RsaPrivateKey::from_pkcs8_der(&payload.rsa_pkcs8)
            .map_err(|_| TokenError::CorruptToken("bad RSA key encoding".into()))?;
        if payload.wrap_key.len() != 32 {
            return Err(TokenError::CorruptToken("bad wrapping key length".into()));
        }
        let mut wrap = Zeroizing::new([0u8; 32]);
        wrap.copy_from_slice(&payload.wrap_key);
        payload.rsa_pkcs8.zeroize();
        payload.wrap_key.zeroize();
        Ok(Self { signing_key, wrapping_key: wrap })
    }
}

impl TokenHandle {
    /// Create a new token. Keys, token id and at-rest salts are derived
    /// deterministically from `seed`, so the same seed reproduces the same
    /// token on another device.
    pub fn create(pin: &str, puk: &str, seed: &[u8; 32]) -> Result<Self, TokenError> {
        Self::create_with_params(pin, puk, seed, StretchParams::default())
    }

    pub fn create_with_params(
        pin: &str,
        puk: &str,
        seed: &[u8; 32],
        stretch: StretchParams,
    ) -> Result<Self, TokenError> {
        if !valid_pin(pin) || !valid_puk(puk) || pin == puk {
            return Err(TokenError::InvalidPinFormat);
        }

        let mut token_id = [0u8; 16];
        hkdf_expand(seed, b"vfa/token/id/v1", &mut token_id);

        let mut rsa_seed = Zeroizing::new([0u8; 32]);
        hkdf_expand(seed, b"vfa/token/rsa/v1", rsa_seed.as_mut());
        let mut rng = ChaCha20Rng::from_seed(*rsa_seed);
        let signing_key =
            RsaPrivateKey::new(&mut rng, RSA_BITS).map_err(|_| TokenError::SignFailed)?;

        let mut wrapping_key = Zeroizing::new([0u8; 32]);
        hkdf_expand(seed, b"vfa/token/wrap/v1", wrapping_key.as_mut());

        let mut salts = [0u8; 64];
        hkdf_expand(seed, b"vfa/token/salts/v1", &mut salts);
        let pin_salt: [u8; 16] = salts[0..16].try_into().unwrap();
        let puk_salt: [u8; 16] = salts[16..32].try_into().unwrap();
        let pin_env_salt: [u8; 16] = salts[32..48].try_into().unwrap();
        let puk_env_salt: [u8; 16] = salts[48..64].try_into().unwrap();

        let secrets = TokenSecrets { signing_key, wrapping_key };
        let payload = secrets.to_payload()?;
        let aad = envelope_aad(&token_id);

        let mut nonces = [0u8; 24];
        hkdf_expand(seed, b"vfa/token/env-nonce/v1", &mut nonces);
        let pin_env = seal_envelope(
            pin,
            pin_env_salt,
            nonces[0..12].try_into().unwrap(),
            &payload,
            &aad,
            &stretch,
        )?;
        let puk_env = seal_envelope(
            puk,
            puk_env_salt,
            nonces[12..24].try_into().unwrap(),
            &payload,
            &aad,
            &stretch,
        )?;

        Ok(Self {
            token_id,
            stretch,
            pin_state: PinState {
                pin: Verifier::new(pin, pin_salt, &stretch)?,
                puk: Verifier::new(puk, puk_salt, &stretch)?,
                retries_remaining: MAX_PIN_RETRIES,
                locked: false,
            },
            pin_env,
            puk_env,
            secrets: Some(secrets),
        })
    }

    pub fn token_id(&self) -> [u8; 16] {
        self.token_id
    }

    pub fn pin_state(&self) -> &PinState {
        &self.pin_state
    }

    /// Open a session. A correct PIN authenticates and resets the retry
    /// counter; a wrong one burns a retry and locks the token at zero.
    pub fn open_session(&mut self, pin: &str) -> Result<TokenSession, TokenError> {
        if self.pin_state.locked {
            return Err(TokenError::TokenLocked);
        }
        if !self.pin_state.pin.matches(pin, &self.stretch)? {
            self.pin_state.retries_remaining = self.pin_state.retries_remaining.saturating_sub(1);
            if self.pin_state.retries_remaining == 0 {
                self.pin_state.locked = true;
            }
            return Err(TokenError::WrongPin {
                retries_remaining: self.pin_state.retries_remaining,
            });
        }
        self.pin_state.retries_remaining = MAX_PIN_RETRIES;
        if self.secrets.is_none() {
            let payload = open_envelope(
                &self.pin_env,
                pin,
                &envelope_aad(&self.token_id),
                &self.stretch,
            )?;
            self.secrets = Some(TokenSecrets::from_payload(&payload)?);
        }
        Ok(TokenSession {
            token_id: self.token_id,
            authenticated: true,
            opened_at: std::time::Instant::now(),
        })
    }

    /// PUK recovery: only valid on a locked token. Sets a new PIN, unseals
    /// the private material from the PUK envelope, resets retries.
    pub fn unlock_with_puk(&mut self, puk: &str, new_pin: &str) -> Result<(), TokenError> {
        if !self.pin_state.locked {
            return Err(TokenError::NotLocked);
        }
        if !valid_pin(new_pin) || new_pin == puk {
            return Err(TokenError::InvalidPinFormat);
        }
        if !self.pin_state.puk.matches(puk, &self.stretch)? {
            return Err(TokenError::WrongPuk);
        }
        let aad = envelope_aad(&self.token_id);
        let payload = open_envelope(&self.puk_env, puk, &aad, &self.stretch)?;
        if self.secrets.is_none() {
            self.secrets = Some(TokenSecrets::from_payload(&payload)?);
        }

        let mut pin_salt = [0u8; 16];
        let mut env_salt = [0u8; 16];
        let mut nonce = [0u8; 12];
        OsRng.fill_bytes(&mut pin_salt);
        OsRng.fill_bytes(&mut env_salt);
        OsRng.fill_bytes(&mut nonce);
        self.pin_state.pin = Verifier::new(new_pin, pin_salt, &self.stretch)?;
        self.pin_env = seal_envelope(new_pin, env_salt, nonce, &payload, &aad, &self.stretch)?;
        self.pin_state.retries_remaining = MAX_PIN_RETRIES;
        self.pin_state.locked = false;
        Ok(())
    }

    fn secrets_for(&self, session: &TokenSession) -> Result<&TokenSecrets, TokenError> {
        if !session.authenticated || session.token_id != self.token_id {
            return Err(TokenError::SessionNotAuthenticated);
        }
        self.secrets
            .as_ref()
            .ok_or(TokenError::SessionNotAuthenticated)
    }

    /// Deterministic RSA-PKCS#1 v1.5 signature over a 32-byte SHA-256 digest.
    /// Byte-identical across sessions, processes, and same-seed tokens.
    pub fn sign_deterministic(
        &self,
        session: &TokenSession,
        digest: &[u8; 32],
    ) -> Result<TokenSignature, TokenError> {
        let secrets = self.secrets_for(session)?;
        let sigma = secrets
            .signing_key
            .sign(Pkcs1v15Sign::new::<Sha256>(), digest)
            .map_err(|_| TokenError::SignFailed)?;
        Ok(TokenSignature {
            sigma,
            algorithm: SignatureAlgorithm::DeterministicRsaPkcs1v15Sha256,
        })
    }

    /// Wrap a 32-byte key under the token's wrapping key. The blob is bound
    /// to this token's identity and fails to unwrap anywhere else.
    pub fn wrap_key(
        &self,
        session: &TokenSession,
        key: &[u8; 32],
    ) -> Result<WrappedBlob, TokenError> {
        let secrets = self.secrets_for(session)?;
        let cipher = Aes256Gcm::new(&Key::<Aes256Gcm>::from(*secrets.wrapping_key));
        let mut nonce = [0u8; WRAP_NONCE_LEN];
        OsRng.fill_bytes(&mut nonce);
        let aad = wrap_aad(&self.token_id);
        let ct = cipher
            .encrypt(&Nonce::from(nonce), Payload { msg: key, aad: &aad })
            .map_err(|_| TokenError::SignFailed)?;
        let mut blob = Vec::with_capacity(WRAP_NONCE_LEN + ct.len());
        blob.extend_from_slice(&nonce);
        blob.extend_from_slice(&ct);
        Ok(WrappedBlob(blob))
    }

    pub fn unwrap_key(
        &self,
        session: &TokenSession,
        blob: &WrappedBlob,
    ) -> Result<Zeroizing<[u8; 32]>, TokenError> {
        let secrets = self.secrets_for(session)?;
        if blob.0.len() < WRAP_NONCE_LEN + WRAP_TAG_LEN {
            return Err(TokenError::UnwrapFailed);
        }
        let (nonce, ct) = blob.0.split_at(WRAP_NONCE_LEN);
        let cipher = Aes256Gcm::new(&Key::<Aes256Gcm>::from(*secrets.wrapping_key));
        let aad = wrap_aad(&self.token_id);
        let nonce_arr: [u8; WRAP_NONCE_LEN] = nonce.try_into().expect("split at nonce length");
        let plain = cipher
            .decrypt(&Nonce::from(nonce_arr), Payload { msg: ct, aad: &aad })
            .map_err(|_| TokenError::UnwrapFailed)?;
        if plain.len() != 32 {
            return Err(TokenError::UnwrapFailed);
        }
        let mut out = Zeroizing::new([0u8; 32]);
        out.copy_from_slice(&plain);
        Ok(out)
    }

    /// SubjectPublicKeyInfo DER of the signing key, for out-of-band
    /// enrollment at a verifier. Requires unsealed private material.
    pub fn public_key_der(&self) -> Result<Vec<u8>, TokenError> {
        let secrets = self
            .secrets
            .as_ref()
            .ok_or(TokenError::SessionNotAuthenticated)?;
        RsaPublicKey::from(&secrets.signing_key)
            .to_public_key_der()
            .map(|d| d.as_bytes().to_vec())
            .map_err(|_| TokenError::SignFailed)
    }

    // ---- at-rest serialization -------------------------------------------

    /// Serialize to the `VFAT` at-rest form. Private material appears only
    /// inside the PIN/PUK-sealed envelopes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let wire = TokenWire {
            token_id: self.token_id.to_vec(),
            stretch: self.stretch,
            pin_salt: self.pin_state.pin.salt.to_vec(),
            pin_hash: self.pin_state.pin.hash.to_vec(),
            puk_salt: self.pin_state.puk.salt.to_vec(),
            puk_hash: self.pin_state.puk.hash.to_vec(),
            retries_remaining: self.pin_state.retries_remaining,
            locked: self.pin_state.locked,
            pin_env: EnvelopeWire::from(&self.pin_env),
            puk_env: EnvelopeWire::from(&self.puk_env),
        };
        let mut out = Vec::new();
        out.extend_from_slice(TOKEN_MAGIC);
        out.push(TOKEN_FORMAT_VERSION);
        ciborium::into_writer(&wire, &mut out).expect("CBOR to vec cannot fail");
        out
    }

    /// Parse a `VFAT` file. The returned handle is sealed: privileged
    /// operations become available after the first successful PIN or PUK
    /// verification.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TokenError> {
        if bytes.len() < 5 || &bytes[0..4] != TOKEN_MAGIC {
            return Err(TokenError::CorruptToken("bad magic".into()));
        }
        if bytes[4] != TOKEN_FORMAT_VERSION {
            return Err(TokenError::CorruptToken(format!(
                "unsupported token format version 0x{:02x}",
                bytes[4]
            )));
        }
        let wire: TokenWire = ciborium::from_reader(&bytes[5..])
            .map_err(|e| TokenError::CorruptToken(format!("bad CBOR: {e}")))?;
        let token_id: [u8; 16] = wire
            .token_id
            .as_slice()
            .try_into()
            .map_err(|_| TokenError::CorruptToken("bad token id length".into()))?;
        if wire.retries_remaining > MAX_PIN_RETRIES
            || (wire.locked != (wire.retries_remaining == 0))
        {
            return Err(TokenError::CorruptToken("inconsistent pin state".into()));
        }
        Ok(Self {
            token_id,
            stretch: wire.stretch,
            pin_state: PinState {
                pin: Verifier {
                    salt: fixed16(&wire.pin_salt)?,
                    hash: fixed32(&wire.pin_hash)?,
                },
                puk: Verifier {
                    salt: fixed16(&wire.puk_salt)?,
                    hash: fixed32(&wire.puk_hash)?,
                },
                retries_remaining: wire.retries_remaining,
                locked: wire.locked,
            },
            pin_env: wire.pin_env.try_into()?,
            puk_env: wire.puk_env.try_into()?,
            secrets: None,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, TokenError> {
        let bytes = std::fs::read(path)
            .map_err(|e| TokenError::CorruptToken(format!("read failed: {e}")))?;
        Self::from_bytes(&bytes)
    }
}

fn wrap_aad(token_id: &[u8; 16]) -> Vec<u8> {
    let mut aad = Vec::with_capacity(17);
    aad.extend_from_slice(token_id);
    aad.push(TOKEN_FORMAT_VERSION);
    aad
}

fn fixed16(v: &[u8]) -> Result<[u8; 16], TokenError> {
    v.try_into()
        .map_err(|_| TokenError::CorruptToken("bad field length".into()))
}

fn fixed32(v: &[u8]) -> Result<[u8; 32], TokenError> {
    v.try_into()
        .map_err(|_| TokenError::CorruptToken("bad field length".into()))
}

#[derive(Serialize, Deserialize)]
struct TokenWire {
    #[serde(with = "serde_bytes")]
    token_id: Vec<u8>,
    stretch: StretchParams,
    #[serde(with = "serde_bytes")]
    pin_salt: Vec<u8>,
    #[serde(with = "serde_bytes")]
    pin_hash: Vec<u8>,
    #[serde(with = "serde_bytes")]
    puk_salt: Vec<u8>,
    #[serde(with = "serde_bytes")]
    puk_hash: Vec<u8>,
    retries_remaining: u8,
    locked: bool,
    pin_env: EnvelopeWire,
    puk_env: EnvelopeWire,
}

#[derive(Serialize, Deserialize)]
struct EnvelopeWire {
    #[serde(with = "serde_bytes")]
    salt: Vec<u8>,
    #[serde(with = "serde_bytes")]
    nonce: Vec<u8>,
    #[serde(with = "serde_bytes")]
    ct: Vec<u8>,
}

impl From<&SealedEnvelope> for EnvelopeWire {
    fn from(env: &SealedEnvelope) -> Self {
        Self {
            salt: env.salt.to_vec(),
            nonce: env.nonce.to_vec(),
            ct: env.ciphertext.clone(),
        }
    }
}

impl TryFrom<EnvelopeWire> for SealedEnvelope {
    type Error = TokenError;

    fn try_from(wire: EnvelopeWire) -> Result<Self, TokenError> {
        Ok(Self {
            salt: fixed16(&wire.salt)?,
            nonce: wire
                .nonce
                .as_slice()
                .try_into()
                .map_err(|_| TokenError::CorruptToken("bad nonce length".into()))?,
            ciphertext: wire.ct,
        })
    }
}
