//! Master-key establishment and rotation.
//!
//! Three ways to obtain the 32-byte master key that seals the credential
//! store:
//!
//! 1. **Baseline derivation** — a deterministic token signature over a fixed
//!    label digest, fed through HKDF-SHA-256 with info `"VFA-MK"`. Pure
//!    function of the token seed; portable with zero stored state.
//! 2. **Wrapped enrollment** — a random key generated once and stored only
//!    as a token-wrapped blob; recovery unwraps it through the token.
//! 3. **Hardened derivation** — HKDF over the signature *and* an OPRF output
//!    bound to the user's verification PIN, info `"VFA-MK-OPRF"`. The
//!    signature alone no longer suffices to reconstruct the key.
//!
//! Master keys exist only in unlocked-session memory; the type has no
//! serialization.

use hkdf::Hkdf;
use sha2::{Digest, Sha256};
use zeroize::Zeroizing;

use crate::oprf::OprfOutput;
use crate::soft_token::{TokenError, TokenHandle, TokenSession, WrappedBlob};

/// Fixed derivation constants. Changing any of them changes every derived
/// key, so they are versioned.
pub mod labels {
    /// The label whose SHA-256 digest the token signs.
    pub const MASTER_LABEL: &[u8] = b"VFA/master/v1";
    /// HKDF info string for the baseline derivation.
    pub const INFO_BASELINE: &[u8] = b"VFA-MK";
    /// HKDF info string for the OPRF-hardened derivation.
    pub const INFO_HARDENED: &[u8] = b"VFA-MK-OPRF";
}

/// How a [`MasterKey`] came to exist in this session.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyOrigin {
    DerivedBaseline,
    Unwrapped,
    DerivedHardened,
}

/// The 256-bit symmetric root protecting all credential records.
///
/// Intentionally not serializable: the key lives in memory for the duration
/// of an unlocked session and nowhere else.
#[derive(Clone)]
pub struct MasterKey {
    bytes: Zeroizing<[u8; 32]>,
    origin: KeyOrigin,
}

impl MasterKey {
    pub fn from_bytes(bytes: [u8; 32], origin: KeyOrigin) -> Self {
        Self { bytes: Zeroizing::new(bytes), origin }
    }

    pub fn origin(&self) -> KeyOrigin {
        self.origin
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.bytes
    }
}

impl std::fmt::Debug for MasterKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MasterKey")
            .field("origin", &self.origin)
            .finish_non_exhaustive()
    }
}

/// A token-wrapped master key; the only persistent trace of an enrolled key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WrappedMasterKey {
    pub blob: WrappedBlob,
    pub created_at: u64,
}

pub(crate) fn hkdf32(ikm: &[u8], info: &[u8]) -> [u8; 32] {
    let mut out = [0u8; 32];
    Hkdf::<Sha256>::new(None, ikm)
        .expand(info, &mut out)
        .expect("32 bytes fits HKDF bounds");
    out
}

fn sign_label(
    token: &TokenHandle,
    session: &TokenSession,
    label: &[u8],
) -> Result<Vec<u8>, TokenError> {
    let digest: [u8; 32] = Sha256::digest(label).into();
    Ok(token.sign_deterministic(session, &digest)?.sigma)
}

/// Baseline path: `K = HKDF(Sign(H(label)), "VFA-MK")`.
pub fn derive_master_baseline(
    token: &TokenHandle,
    session: &TokenSession,
) -> Result<MasterKey, TokenError> {
    derive_baseline_with(token, session, labels::MASTER_LABEL, labels::INFO_BASELINE)
}

pub(crate) fn derive_baseline_with(
    token: &TokenHandle,
    session: &TokenSession,
    label: &[u8],
    info: &[u8],
) -> Result<MasterKey, TokenError> {
    let sigma = sign_label(token, session, label)?;
    Ok(MasterKey::from_bytes(
        hkdf32(&sigma, info),
        KeyOrigin::DerivedBaseline,
    ))
}

/// Enrollment path: the caller supplies fresh entropy, gets back the key and
/// its token-wrapped blob. Only the blob is ever persisted.
pub fn enroll_master_wrapped(
    token: &TokenHandle,
    session: &TokenSession,
    entropy: &[u8; 32],
    now_ms: u64,
) -> Result<(MasterKey, WrappedMasterKey), TokenError> {
    let blob = token.wrap_key(session, entropy)?;
    Ok((
        MasterKey::from_bytes(*entropy, KeyOrigin::Unwrapped),
        WrappedMasterKey { blob, created_at: now_ms },
    ))
}

pub fn recover_master_wrapped(
    token: &TokenHandle,
    session: &TokenSession,
    wmk: &WrappedMasterKey,
) -> Result<MasterKey, TokenError> {
    let key = token.unwrap_key(session, &wmk.blob)?;
    Ok(MasterKey::from_bytes(*key, KeyOrigin::Unwrapped))
}

/// Length-prefixed concatenation: `be32(|σ|) ∥ σ ∥ be32(|y|) ∥ y`. The
/// prefixes make the IKM parse unambiguous regardless of signature length.
fn dual_ikm(sigma: &[u8], y: &[u8; 32]) -> Zeroizing<Vec<u8>> {
    let mut ikm = Vec::with_capacity(8 + sigma.len() + 32);
    ikm.extend_from_slice(&(sigma.len() as u32).to_be_bytes());
    ikm.extend_from_slice(sigma);
    ikm.extend_from_slice(&(y.len() as u32).to_be_bytes());
    ikm.extend_from_slice(y);
    Zeroizing::new(ikm)
}

/// Hardened path: `K = HKDF(σ ∥ y, "VFA-MK-OPRF")`. Both the deterministic
/// signature and the OPRF output are required; neither alone suffices.
pub fn derive_master_hardened(
    token: &TokenHandle,
    session: &TokenSession,
    y: &OprfOutput,
) -> Result<MasterKey, TokenError> {
    let sigma = sign_label(token, session, labels::MASTER_LABEL)?;
    let ikm = dual_ikm(&sigma, y.as_bytes());
    Ok(MasterKey::from_bytes(
        hkdf32(&ikm, labels::INFO_HARDENED),
        KeyOrigin::DerivedHardened,
    ))
}

/// Hardened derivation from an already-obtained signature. Used by the
/// unlock path, which signs once and reuses σ.
pub fn derive_master_hardened_from_sigma(sigma: &[u8], y: &OprfOutput) -> MasterKey {
    let ikm = dual_ikm(sigma, y.as_bytes());
    MasterKey::from_bytes(hkdf32(&ikm, labels::INFO_HARDENED), KeyOrigin::DerivedHardened)
}

/// Re-seal every record of `store` under `new` (fresh nonces), leaving the
/// plaintext records — key pairs, counters, tombstones — untouched. Fails
/// without side effects if any record refuses to open under `old`.
pub fn rotate_master(
    old: &MasterKey,
    new: &MasterKey,
    store: &crate::cred_store::EncryptedStore,
) -> Result<crate::cred_store::EncryptedStore, crate::cred_store::StoreError> {
    let bodies = crate::cred_store::open_all(old, store)?;
    let store_id = store.store_id();
    let mut rotated = store.clone();
    let resealed = bodies
        .iter()
        .enumerate()
        .map(|(i, body)| crate::cred_store::seal_body(new, body, &store_id, i))
        .collect();
    rotated.replace_records(resealed);
    rotated.set_version(store.version() + 1);
    Ok(rotated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::soft_token::TokenHandle;
    use crate::stretch::StretchParams;

    fn token(byte: u8) -> TokenHandle {
        TokenHandle::create_with_params("1234", "87654321", &[byte; 32], StretchParams::FAST)
            .unwrap()
    }

    #[test]
    fn label_constants_feed_the_derivation() {
        let mut t = token(1);
        let s = t.open_session("1234").unwrap();
        let standard = derive_master_baseline(&t, &s).unwrap();
        let other_label =
            derive_baseline_with(&t, &s, b"VFA/master/v2", labels::INFO_BASELINE).unwrap();
        let other_info =
            derive_baseline_with(&t, &s, labels::MASTER_LABEL, b"VFA-MK-ALT").unwrap();
        assert_ne!(standard.as_bytes(), other_label.as_bytes());
        assert_ne!(standard.as_bytes(), other_info.as_bytes());
    }

    #[test]
    fn dual_ikm_is_length_prefixed() {
        let ikm = dual_ikm(&[0xAA; 3], &[0xBB; 32]);
        assert_eq!(&ikm[0..4], &3u32.to_be_bytes());
        assert_eq!(&ikm[4..7], &[0xAA; 3]);
        assert_eq!(&ikm[7..11], &32u32.to_be_bytes());
    }
}
