//! Authenticator-side CTAP2 operations: `MakeCredential` and `GetAssertion`.
//!
//! Emits WebAuthn-conformant authenticator data (byte-exact layout), packed
//! self-attestation objects and assertion responses. Operations require an
//! [`UnlockedStore`]; there is no code path that signs out of a locked
//! store. The UV flag is always set on emitted data because unlocking the
//! store already required token PIN entry — that is the user-verification
//! event.

use ciborium::value::Value;
use p256::ecdsa::signature::Signer;
use p256::ecdsa::DerSignature;
use rand::rngs::OsRng;
use sha2::{Digest, Sha256};

use crate::cose;
use crate::cred_store::{CredentialId, CredentialRecord, RpId, UnlockedStore};

/// Flag bits in authenticator data.
pub const FLAG_UP: u8 = 0x01;
pub const FLAG_UV: u8 = 0x04;
pub const FLAG_AT: u8 = 0x40;

/// No vendor identity claimed.
pub const AAGUID: [u8; 16] = [0u8; 16];

pub const COSE_ALG_ES256: i64 = -7;

#[derive(Debug, thiserror::Error)]
pub enum CtapError {
    #[error("an excluded credential already exists for this relying party")]
    CredentialExcluded,
    #[error("no matching credential for this relying party")]
    NoCredentials,
    #[error("AT flag and attested credential data must be present together")]
    InvalidFlags,
    #[error("invalid parameter: {0}")]
    InvalidParams(&'static str),
    #[error(transparent)]
    Store(#[from] crate::cred_store::StoreError),
}

#[derive(Debug, Clone)]
pub struct MakeCredentialParams {
    pub client_data_hash: [u8; 32],
    pub rp_id: RpId,
    pub user_handle: Vec<u8>,
    pub user_name: String,
    pub require_uv: bool,
    pub exclude_list: Vec<CredentialId>,
}

#[derive(Debug, Clone)]
pub struct GetAssertionParams {
    pub client_data_hash: [u8; 32],
    pub rp_id: RpId,
    pub allow_list: Option<Vec<CredentialId>>,
}

/// Attested credential data carried in registration authenticator data.
#[derive(Debug, Clone)]
pub struct AttestedCredential {
    pub aaguid: [u8; 16],
    pub credential_id: CredentialId,
    /// Canonical COSE_Key bytes.
    pub cose_key: Vec<u8>,
}

/// Packed self-attestation over a fresh credential.
#[derive(Debug, Clone)]
pub struct AttestationObject {
    pub fmt: &'static str,
    pub auth_data: Vec<u8>,
    pub alg: i64,
    pub signature: Vec<u8>,
}

impl AttestationObject {
    /// CBOR map `{fmt, attStmt, authData}` in CTAP2 canonical key order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let att_stmt = Value::Map(vec![
            (Value::Text("alg".into()), Value::Integer(self.alg.into())),
            (Value::Text("sig".into()), Value::Bytes(self.signature.clone())),
        ]);
        let map = Value::Map(vec![
            (Value::Text("fmt".into()), Value::Text(self.fmt.into())),
            (Value::Text("attStmt".into()), att_stmt),
            (Value::Text("authData".into()), Value::Bytes(self.auth_data.clone())),
        ]);
        let mut out = Vec::new();
        ciborium::into_writer(&map, &mut out).expect("CBOR to vec cannot fail");
        out
    }
}

/// Assertion over an existing credential.
#[derive(Debug, Clone)]
pub struct AssertionResponse {
    pub credential_id: CredentialId,
    pub auth_data: Vec<u8>,
    pub signature: Vec<u8>,
    pub user_handle: Vec<u8>,
}

/// Byte-exact authenticator data:
/// `SHA-256(rp_id) ∥ flags ∥ be32(counter) [∥ attested credential data]`.
pub fn build_authenticator_data(
    rp_id: &RpId,
    flags: u8,
    counter: u32,
    attested: Option<&AttestedCredential>,
) -> Result<Vec<u8>, CtapError> {
    if (flags & FLAG_AT != 0) != attested.is_some() {
        return Err(CtapError::InvalidFlags);
    }
    let mut out = Vec::with_capacity(37);
    let rp_hash: [u8; 32] = Sha256::digest(rp_id.as_str().as_bytes()).into();
    out.extend_from_slice(&rp_hash);
    out.push(flags);
    out.extend_from_slice(&counter.to_be_bytes());
    if let Some(att) = attested {
        out.extend_from_slice(&att.aaguid);
        out.extend_from_slice(&(att.credential_id.0.len() as u16).to_be_bytes());
        out.extend_from_slice(&att.credential_id.0);
        out.extend_from_slice(&att.cose_key);
    }
    Ok(out)
}

/// Register a fresh credential: generate a P-256 key pair, seal the record
/// into the store (counter 0), and return packed self-attestation. The
/// store mutation happens before the attestation is produced.
pub fn make_credential(
    unlocked: &mut UnlockedStore,
    params: &MakeCredentialParams,
    now_ms: u64,
) -> Result<AttestationObject, CtapError> {
    if !params.exclude_list.is_empty() {
        let existing = unlocked.credentials_for_rp(&params.rp_id);
        for idx in existing {
            let cred = unlocked.credential_at(idx).expect("index from rp scan");
            if params.exclude_list.contains(&cred.credential_id()) {
                return Err(CtapError::CredentialExcluded);
            }
        }
    }

    let record = CredentialRecord::generate(
        params.rp_id.clone(),
        params.user_handle.clone(),
        params.user_name.clone(),
        &mut OsRng,
        now_ms,
    )?;
    let signing_key = record.signing_key();
    let attested = AttestedCredential {
        aaguid: AAGUID,
        credential_id: record.credential_id(),
        cose_key: cose::encode_es256(&record.public_key()),
    };
    let auth_data = build_authenticator_data(
        &params.rp_id,
        FLAG_UP | FLAG_UV | FLAG_AT,
        record.sign_counter(),
        Some(&attested),
    )?;

    // Persisted before the attestation leaves this function.
    unlocked.push_credential(record);

    let mut message = auth_data.clone();
    message.extend_from_slice(&params.client_data_hash);
    let signature: DerSignature = signing_key.sign(&message);

    Ok(AttestationObject {
        fmt: "packed",
        auth_data,
        alg: COSE_ALG_ES256,
        signature: signature.as_bytes().to_vec(),
    })
}

/// Produce an assertion. The matching record's counter is incremented and
/// re-sealed before the signature is returned, so a crash between the two
/// steps can never replay a counter value.
pub fn get_assertion(
    unlocked: &mut UnlockedStore,
    params: &GetAssertionParams,
) -> Result<AssertionResponse, CtapError> {
    let mut candidates = unlocked.credentials_for_rp(&params.rp_id);
    if let Some(allow) = &params.allow_list {
        candidates.retain(|&i| {
            allow.contains(&unlocked.credential_at(i).expect("rp scan index").credential_id())
        });
    }
    // Most recently created wins when several match; ties break to the
    // later record.
    let chosen = candidates
        .into_iter()
        .max_by_key(|&i| {
            let c = unlocked.credential_at(i).expect("rp scan index");
            (c.created_at(), i)
        })
        .ok_or(CtapError::NoCredentials)?;

    let counter = unlocked.bump_counter_at(chosen);
    let cred = unlocked.credential_at(chosen).expect("chosen index");
    let auth_data = build_authenticator_data(&params.rp_id, FLAG_UP | FLAG_UV, counter, None)?;

    let mut message = auth_data.clone();
    message.extend_from_slice(&params.client_data_hash);
    let signature: DerSignature = cred.signing_key().sign(&message);

    Ok(AssertionResponse {
        credential_id: cred.credential_id(),
        auth_data,
        signature: signature.as_bytes().to_vec(),
        user_handle: cred.user_handle().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cred_store::{EncryptedStore, MasterRef, StoreMode, UnlockedStore};
    use crate::key_hierarchy::{KeyOrigin, MasterKey};

    fn unlocked() -> UnlockedStore {
        let master = MasterKey::from_bytes([3u8; 32], KeyOrigin::Unwrapped);
        let store = EncryptedStore::new(StoreMode::Baseline, MasterRef::Derived);
        UnlockedStore::open(master, &store).unwrap()
    }

    fn rp(s: &str) -> RpId {
        RpId::new(s).unwrap()
    }

    #[test]
    fn auth_data_layout() {
        let data = build_authenticator_data(&rp("example.com"), FLAG_UP, 0, None).unwrap();
        assert_eq!(data.len(), 37);
        let expected: [u8; 32] = Sha256::digest(b"example.com").into();
        assert_eq!(&data[0..32], &expected);
        assert_eq!(data[32], 0x01);
        assert_eq!(&data[33..37], &[0, 0, 0, 0]);

        let high = build_authenticator_data(&rp("example.com"), FLAG_UP, 0x01020304, None).unwrap();
        assert_eq!(&high[33..37], &[1, 2, 3, 4]);
    }

    #[test]
    fn at_flag_requires_attested_data() {
        assert!(matches!(
            build_authenticator_data(&rp("example.com"), FLAG_UP | FLAG_AT, 0, None),
            Err(CtapError::InvalidFlags)
        ));
        let attested = AttestedCredential {
            aaguid: AAGUID,
            credential_id: CredentialId([1; 16]),
            cose_key: vec![0xA0],
        };
        assert!(matches!(
            build_authenticator_data(&rp("example.com"), FLAG_UP, 0, Some(&attested)),
            Err(CtapError::InvalidFlags)
        ));
    }

    #[test]
    fn counters_increment_and_persist_before_emit() {
        let mut store = unlocked();
        let mk = MakeCredentialParams {
            client_data_hash: [9; 32],
            rp_id: rp("example.com"),
            user_handle: b"u".to_vec(),
            user_name: "alice".into(),
            require_uv: true,
            exclude_list: vec![],
        };
        make_credential(&mut store, &mk, 1).unwrap();

        let ga = GetAssertionParams {
            client_data_hash: [9; 32],
            rp_id: rp("example.com"),
            allow_list: None,
        };
        for expect in 1..=2u32 {
            let asr = get_assertion(&mut store, &ga).unwrap();
            let counter = u32::from_be_bytes(asr.auth_data[33..37].try_into().unwrap());
            assert_eq!(counter, expect);
            // Sealed copy already carries the emitted counter.
            let reopened = crate::cred_store::UnlockedStore::open(
                store.master().clone(),
                store.encrypted(),
            )
            .unwrap();
            assert_eq!(reopened.credentials().next().unwrap().sign_counter(), expect);
        }
    }

    #[test]
    fn exclude_list_refuses_existing_credential() {
        let mut store = unlocked();
        let mk = MakeCredentialParams {
            client_data_hash: [0; 32],
            rp_id: rp("example.com"),
            user_handle: b"u".to_vec(),
            user_name: "alice".into(),
            require_uv: true,
            exclude_list: vec![],
        };
        make_credential(&mut store, &mk, 1).unwrap();
        let existing = store.credentials().next().unwrap().credential_id();

        let excluded = MakeCredentialParams { exclude_list: vec![existing], ..mk.clone() };
        assert!(matches!(
            make_credential(&mut store, &excluded, 2),
            Err(CtapError::CredentialExcluded)
        ));

        // Same id excluded at a different RP does not block registration.
        let other_rp = MakeCredentialParams {
            rp_id: rp("other.example"),
            exclude_list: vec![existing],
            ..mk
        };
        make_credential(&mut store, &other_rp, 3).unwrap();
    }

    #[test]
    fn newest_credential_wins_without_allow_list() {
        let mut store = unlocked();
        let mk = |name: &str| MakeCredentialParams {
            client_data_hash: [0; 32],
            rp_id: rp("example.com"),
            user_handle: name.as_bytes().to_vec(),
            user_name: name.into(),
            require_uv: true,
            exclude_list: vec![],
        };
        make_credential(&mut store, &mk("old"), 1).unwrap();
        make_credential(&mut store, &mk("new"), 2).unwrap();
        let asr = get_assertion(
            &mut store,
            &GetAssertionParams {
                client_data_hash: [0; 32],
                rp_id: rp("example.com"),
                allow_list: None,
            },
        )
        .unwrap();
        assert_eq!(asr.user_handle, b"new");
    }
}
