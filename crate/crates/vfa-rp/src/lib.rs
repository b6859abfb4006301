//! WebAuthn relying-party verifier.
//!
//! Verifies packed self-attestation registrations and ES256 assertions,
//! enforces strict counter monotonicity (a regression signals a cloned
//! authenticator), and optionally gates enrollment on proof of possession of
//! an e-signature token: the client signs a server challenge, the server
//! verifies it against an enrolled token public key and issues a short-lived
//! registration token that the WebAuthn ceremony must present.
//!
//! This crate sees only standard WebAuthn structures. It has no dependency
//! on the authenticator, key-hierarchy, store, sync or OPRF crates; the
//! ceremony payloads it parses are its whole interface to the client.

pub mod http;
pub mod parse;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use p256::ecdsa::signature::Verifier as _;
use p256::ecdsa::DerSignature;
use rand::rngs::OsRng;
use rand::RngCore;
use rsa::pkcs8::DecodePublicKey;
use rsa::{Pkcs1v15Sign, RsaPublicKey};
use sha2::{Digest, Sha256};

use parse::{
    parse_attestation_object, parse_authenticator_data, parse_client_data, parse_cose_es256,
};

pub const FLAG_UP: u8 = 0x01;
pub const FLAG_UV: u8 = 0x04;
pub const FLAG_AT: u8 = 0x40;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RpError {
    #[error("challenge unknown, reused or mismatched")]
    ChallengeMismatch,
    #[error("challenge or registration token expired")]
    Expired,
    #[error("policy requires a QES registration token")]
    MissingRegistrationToken,
    #[error("attestation rejected: {0}")]
    BadAttestation(&'static str),
    #[error("signature verification failed")]
    BadSignature,
    #[error("assertion counter did not increase (possible cloned authenticator)")]
    CounterRegression,
    #[error("unknown credential")]
    UnknownCredential,
    #[error("unknown token key")]
    UnknownToken,
    #[error("bad request: {0}")]
    BadRequest(&'static str),
}

impl RpError {
    /// Stable machine-readable code (wire + exit-code mapping).
    pub fn code(&self) -> &'static str {
        match self {
            RpError::ChallengeMismatch => "challenge_mismatch",
            RpError::Expired => "expired",
            RpError::MissingRegistrationToken => "missing_registration_token",
            RpError::BadAttestation(_) => "bad_attestation",
            RpError::BadSignature => "bad_signature",
            RpError::CounterRegression => "counter_regression",
            RpError::UnknownCredential => "unknown_credential",
            RpError::UnknownToken => "unknown_token",
            RpError::BadRequest(_) => "bad_request",
        }
    }
}

/// Injectable clock (tests simulate expiry instead of sleeping).
pub trait TimeSource: Send + Sync {
    fn now_ms(&self) -> u64;
}

struct SystemClock;

impl TimeSource for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .expect("clock before epoch")
            .as_millis() as u64
    }
}

#[derive(Debug, Clone)]
pub struct RpPolicy {
    /// Require the UV flag on registrations and assertions.
    pub require_uv: bool,
    /// Gate registration on a QES proof of token possession.
    pub require_qes_gate: bool,
    /// Lifetime of issued registration tokens.
    pub registration_token_lifetime_ms: u64,
    /// Lifetime of registration/login/QES challenges.
    pub challenge_lifetime_ms: u64,
}

impl Default for RpPolicy {
    fn default() -> Self {
        Self {
            require_uv: true,
            require_qes_gate: false,
            registration_token_lifetime_ms: 120_000,
            challenge_lifetime_ms: 120_000,
        }
    }
}

/// Registration ceremony state handed to the client.
#[derive(Debug, Clone)]
pub struct RegistrationChallenge {
    pub challenge: [u8; 32],
    pub rp_id: String,
    pub expires_at: u64,
    /// Opaque token from the QES gate, if policy demands one.
    pub registration_token: Option<Vec<u8>>,
}

#[derive(Debug, Clone)]
pub struct LoginChallenge {
    pub challenge: [u8; 32],
    pub expires_at: u64,
}

/// What the server retains per credential: public key material and the last
/// accepted counter. Nothing else.
#[derive(Debug, Clone)]
pub struct StoredPublicKey {
    pub credential_id: Vec<u8>,
    pub rp_id: String,
    pub cose_public_key: Vec<u8>,
    pub last_counter: u32,
}

#[derive(Debug, Clone)]
pub struct AcceptedLogin {
    pub credential_id: Vec<u8>,
    pub counter: u32,
    pub user_handle: Vec<u8>,
}

/// Client-supplied assertion material.
#[derive(Debug, Clone)]
pub struct AssertionInput {
    pub credential_id: Vec<u8>,
    pub auth_data: Vec<u8>,
    pub signature: Vec<u8>,
    pub user_handle: Vec<u8>,
    pub client_data: Vec<u8>,
}

/// Token issued by the QES gate, valid briefly and for one registration.
#[derive(Debug, Clone)]
pub struct RegistrationToken {
    pub token: [u8; 32],
    pub expires_at: u64,
}

#[derive(Default)]
struct Inner {
    reg_challenges: HashMap<[u8; 32], (String, u64)>,
    login_challenges: HashMap<[u8; 32], u64>,
    credentials: HashMap<Vec<u8>, StoredPublicKey>,
    qes_keys: HashMap<[u8; 8], RsaPublicKey>,
    qes_challenges: HashMap<[u8; 32], u64>,
    reg_tokens: HashMap<[u8; 32], u64>,
}

pub struct RelyingParty {
    policy: RpPolicy,
    clock: Arc<dyn TimeSource>,
    inner: Mutex<Inner>,
}

impl RelyingParty {
    pub fn new(policy: RpPolicy) -> Self {
        Self::with_clock(policy, Arc::new(SystemClock))
    }

    pub fn with_clock(policy: RpPolicy, clock: Arc<dyn TimeSource>) -> Self {
        Self { policy, clock, inner: Mutex::new(Inner::default()) }
    }

    pub fn policy(&self) -> &RpPolicy {
        &self.policy
    }

    fn now(&self) -> u64 {
        self.clock.now_ms()
    }

    fn random32() -> [u8; 32] {
        let mut out = [0u8; 32];
        OsRng.fill_bytes(&mut out);
        out
    }

    // ---- ceremonies ------------------------------------------------------

    pub fn begin_registration(&self, rp_id: &str) -> RegistrationChallenge {
        let challenge = Self::random32();
        let expires_at = self.now() + self.policy.challenge_lifetime_ms;
        self.inner
            .lock()
            .expect("rp state poisoned")
            .reg_challenges
            .insert(challenge, (rp_id.to_string(), expires_at));
        RegistrationChallenge {
            challenge,
            rp_id: rp_id.to_string(),
            expires_at,
            registration_token: None,
        }
    }

    /// Reconstruct the pending challenge metadata (HTTP handlers keep no
    /// state of their own).
    pub fn pending_registration(&self, challenge: &[u8; 32]) -> Option<RegistrationChallenge> {
        self.inner
            .lock()
            .expect("rp state poisoned")
            .reg_challenges
            .get(challenge)
            .map(|(rp_id, expires_at)| RegistrationChallenge {
                challenge: *challenge,
                rp_id: rp_id.clone(),
                expires_at: *expires_at,
                registration_token: None,
            })
    }

    pub fn begin_login(&self) -> LoginChallenge {
        let challenge = Self::random32();
        let expires_at = self.now() + self.policy.challenge_lifetime_ms;
        self.inner
            .lock()
            .expect("rp state poisoned")
            .login_challenges
            .insert(challenge, expires_at);
        LoginChallenge { challenge, expires_at }
    }

    /// Verify a registration: challenge liveness and single use, QES policy,
    /// rp-id binding, UP/UV flags, attested key validity, and the packed
    /// self-attestation signature.
    pub fn verify_registration(
        &self,
        challenge: &RegistrationChallenge,
        attestation_object: &[u8],
        client_data: &[u8],
    ) -> Result<StoredPublicKey, RpError> {
        let collected =
            parse_client_data(client_data).map_err(|_| RpError::BadAttestation("client data"))?;
        if collected.type_ != "webauthn.create" {
            return Err(RpError::BadAttestation("client data type"));
        }
        if collected.challenge.as_slice() != challenge.challenge {
            return Err(RpError::ChallengeMismatch);
        }

        let now = self.now();
        {
            let mut inner = self.inner.lock().expect("rp state poisoned");
            // Consume exactly once; a parallel submission of the same
            // challenge loses here.
            let (rp_id, expires_at) = inner
                .reg_challenges
                .remove(&challenge.challenge)
                .ok_or(RpError::ChallengeMismatch)?;
            if rp_id != challenge.rp_id {
                return Err(RpError::ChallengeMismatch);
            }
            if now > expires_at {
                return Err(RpError::Expired);
            }
            if self.policy.require_qes_gate {
                let token: [u8; 32] = challenge
                    .registration_token
                    .as_deref()
                    .and_then(|t| t.try_into().ok())
                    .ok_or(RpError::MissingRegistrationToken)?;
                let expires = inner
                    .reg_tokens
                    .remove(&token)
                    .ok_or(RpError::MissingRegistrationToken)?;
                if now > expires {
                    return Err(RpError::Expired);
                }
            }
        }

        let att = parse_attestation_object(attestation_object)
            .map_err(|_| RpError::BadAttestation("attestation object"))?;
        if att.fmt != "packed" {
            return Err(RpError::BadAttestation("attestation format"));
        }
        if att.alg != -7 {
            return Err(RpError::BadAttestation("attestation algorithm"));
        }
        let auth = parse_authenticator_data(&att.auth_data)
            .map_err(|_| RpError::BadAttestation("authenticator data"))?;

        let expected_rp_hash: [u8; 32] = Sha256::digest(challenge.rp_id.as_bytes()).into();
        if auth.rp_id_hash != expected_rp_hash {
            return Err(RpError::BadAttestation("rp id hash"));
        }
        if auth.flags & FLAG_UP == 0 {
            return Err(RpError::BadAttestation("user presence"));
        }
        if self.policy.require_uv && auth.flags & FLAG_UV == 0 {
            return Err(RpError::BadAttestation("user verification"));
        }
        let attested = auth
            .attested
            .as_ref()
            .ok_or(RpError::BadAttestation("attested credential data"))?;
        if attested.credential_id.is_empty() {
            return Err(RpError::BadAttestation("empty credential id"));
        }
        let key = parse_cose_es256(&attested.cose_key)
            .map_err(|_| RpError::BadAttestation("COSE key"))?;

        // Packed self-attestation: signed by the brand-new credential key.
        let mut message = att.auth_data.clone();
        message.extend_from_slice(&Sha256::digest(client_data));
        let signature =
            DerSignature::from_bytes(&att.signature).map_err(|_| RpError::BadSignature)?;
        key.verify(&message, &signature)
            .map_err(|_| RpError::BadSignature)?;

        let stored = StoredPublicKey {
            credential_id: attested.credential_id.clone(),
            rp_id: challenge.rp_id.clone(),
            cose_public_key: attested.cose_key.clone(),
            last_counter: auth.counter,
        };
        let mut inner = self.inner.lock().expect("rp state poisoned");
        if inner.credentials.contains_key(&stored.credential_id) {
            return Err(RpError::BadAttestation("credential id already registered"));
        }
        inner
            .credentials
            .insert(stored.credential_id.clone(), stored.clone());
        Ok(stored)
    }

    /// Verify an assertion: challenge liveness, rp binding, flags, ES256
    /// signature over `auth_data ∥ SHA-256(client_data)`, and strictly
    /// increasing counter.
    pub fn verify_assertion(&self, assertion: &AssertionInput) -> Result<AcceptedLogin, RpError> {
        let collected = parse_client_data(&assertion.client_data)
            .map_err(|_| RpError::BadAttestation("client data"))?;
        if collected.type_ != "webauthn.get" {
            return Err(RpError::BadAttestation("client data type"));
        }
        let challenge: [u8; 32] = collected
            .challenge
            .as_slice()
            .try_into()
            .map_err(|_| RpError::ChallengeMismatch)?;

        let now = self.now();
        let stored = {
            let mut inner = self.inner.lock().expect("rp state poisoned");
            let expires_at = inner
                .login_challenges
                .remove(&challenge)
                .ok_or(RpError::ChallengeMismatch)?;
            if now > expires_at {
                return Err(RpError::Expired);
            }
            inner
                .credentials
                .get(&assertion.credential_id)
                .cloned()
                .ok_or(RpError::UnknownCredential)?
        };

        let auth = parse_authenticator_data(&assertion.auth_data)
            .map_err(|_| RpError::BadAttestation("authenticator data"))?;
        let expected_rp_hash: [u8; 32] = Sha256::digest(stored.rp_id.as_bytes()).into();
        if auth.rp_id_hash != expected_rp_hash {
            return Err(RpError::BadAttestation("rp id hash"));
        }
        if auth.flags & FLAG_UP == 0 {
            return Err(RpError::BadAttestation("user presence"));
        }
        if self.policy.require_uv && auth.flags & FLAG_UV == 0 {
            return Err(RpError::BadAttestation("user verification"));
        }

        let key = parse_cose_es256(&stored.cose_public_key)
            .map_err(|_| RpError::BadAttestation("stored COSE key"))?;
        let mut message = assertion.auth_data.clone();
        message.extend_from_slice(&Sha256::digest(&assertion.client_data));
        let signature =
            DerSignature::from_bytes(&assertion.signature).map_err(|_| RpError::BadSignature)?;
        key.verify(&message, &signature)
            .map_err(|_| RpError::BadSignature)?;

        // Counter update is atomic per credential; the re-check inside the
        // lock closes the race between two accepted assertions.
        let mut inner = self.inner.lock().expect("rp state poisoned");
        let entry = inner
            .credentials
            .get_mut(&assertion.credential_id)
            .ok_or(RpError::UnknownCredential)?;
        if auth.counter <= entry.last_counter {
            return Err(RpError::CounterRegression);
        }
        entry.last_counter = auth.counter;
        Ok(AcceptedLogin {
            credential_id: assertion.credential_id.clone(),
            counter: auth.counter,
            user_handle: assertion.user_handle.clone(),
        })
    }

    pub fn credential(&self, credential_id: &[u8]) -> Option<StoredPublicKey> {
        self.inner
            .lock()
            .expect("rp state poisoned")
            .credentials
            .get(credential_id)
            .cloned()
    }

    // ---- QES gate --------------------------------------------------------

    /// Enroll a token public key (out-of-band in a real deployment).
    /// Returns the fingerprint clients reference in proofs.
    pub fn register_qes_key(&self, spki_der: &[u8]) -> Result<[u8; 8], RpError> {
        let key = RsaPublicKey::from_public_key_der(spki_der)
            .map_err(|_| RpError::BadRequest("bad SubjectPublicKeyInfo"))?;
        let fingerprint = qes_fingerprint(spki_der);
        self.inner
            .lock()
            .expect("rp state poisoned")
            .qes_keys
            .insert(fingerprint, key);
        Ok(fingerprint)
    }

    pub fn qes_challenge(&self) -> [u8; 32] {
        let challenge = Self::random32();
        let expires_at = self.now() + self.policy.challenge_lifetime_ms;
        self.inner
            .lock()
            .expect("rp state poisoned")
            .qes_challenges
            .insert(challenge, expires_at);
        challenge
    }

    /// Verify a deterministic RSA signature over `SHA-256(challenge)` made
    /// by an enrolled token and issue a registration token.
    pub fn qes_prove(
        &self,
        fingerprint: [u8; 8],
        challenge: [u8; 32],
        signature: &[u8],
    ) -> Result<RegistrationToken, RpError> {
        let now = self.now();
        let key = {
            let mut inner = self.inner.lock().expect("rp state poisoned");
            let expires_at = inner
                .qes_challenges
                .remove(&challenge)
                .ok_or(RpError::ChallengeMismatch)?;
            if now > expires_at {
                return Err(RpError::Expired);
            }
            inner
                .qes_keys
                .get(&fingerprint)
                .cloned()
                .ok_or(RpError::UnknownToken)?
        };
        let digest: [u8; 32] = Sha256::digest(challenge).into();
        key.verify(Pkcs1v15Sign::new::<Sha256>(), &digest, signature)
            .map_err(|_| RpError::BadSignature)?;

        let token = Self::random32();
        let expires_at = now + self.policy.registration_token_lifetime_ms;
        self.inner
            .lock()
            .expect("rp state poisoned")
            .reg_tokens
            .insert(token, expires_at);
        Ok(RegistrationToken { token, expires_at })
    }
}

/// Fingerprint a token public key: first 8 bytes of SHA-256 over the DER.
pub fn qes_fingerprint(spki_der: &[u8]) -> [u8; 8] {
    let digest = Sha256::digest(spki_der);
    digest[..8].try_into().unwrap()
}
