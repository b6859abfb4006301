//! AEAD-sealed FIDO2 credential store.
//!
//! Every record is AES-256-GCM sealed under the master key with associated
//! data binding the store id, the record's position, and the format version,
//! so records cannot be replayed between stores or silently reordered. The
//! serialized envelope (`VFAS` magic, version byte, canonical CBOR) is both
//! the on-disk format and the sync wire payload; it never contains plaintext
//! key material.
//!
//! Deletion appends a sealed tombstone so removal propagates through sync
//! merges without the server learning that anything was deleted.

use aes_gcm::aead::{Aead, Payload};
use aes_gcm::{Aes256Gcm, Key, KeyInit, Nonce};
use p256::ecdsa::{SigningKey, VerifyingKey};
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use zeroize::{Zeroize, Zeroizing};

use crate::key_hierarchy::{
    derive_master_baseline, derive_master_hardened_from_sigma, recover_master_wrapped, labels,
    MasterKey, WrappedMasterKey,
};
use crate::oprf::{self, OprfError, OprfEvaluator};
use crate::soft_token::{TokenError, TokenHandle, TokenSession, WrappedBlob};
use crate::stretch::StretchParams;

pub const STORE_MAGIC: &[u8; 4] = b"VFAS";
pub const STORE_FORMAT_VERSION: u8 = 0x01;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("record failed authentication (wrong key or tampering)")]
    DecryptFailed,
    #[error("no record with that credential id")]
    NotFound,
    #[error("corrupt store: {0}")]
    CorruptStore(String),
    #[error("corrupt record body: {0}")]
    CorruptRecord(&'static str),
    #[error("invalid record: {0}")]
    InvalidRecord(&'static str),
}

#[derive(Debug, thiserror::Error)]
pub enum UnlockError {
    #[error("store failed to decrypt")]
    DecryptFailed,
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error("store is hardened but no OPRF client was provided or reachable")]
    OprfUnavailable,
    #[error(transparent)]
    Oprf(OprfError),
    #[error("corrupt store: {0}")]
    CorruptStore(String),
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// 16-byte random credential identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CredentialId(pub [u8; 16]);

impl CredentialId {
    pub fn random() -> Self {
        let mut id = [0u8; 16];
        OsRng.fill_bytes(&mut id);
        Self(id)
    }
}

impl std::fmt::Display for CredentialId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", hex::encode(self.0))
    }
}

/// Canonical relying-party identifier: lowercase ASCII, no scheme, no port.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RpId(String);

impl RpId {
    pub fn new(s: &str) -> Result<Self, StoreError> {
        let ok = !s.is_empty()
            && s.is_ascii()
            && !s.contains(':')
            && !s.contains('/')
            && !s.chars().any(|c| c.is_ascii_uppercase());
        if ok {
            Ok(Self(s.to_string()))
        } else {
            Err(StoreError::InvalidRecord(
                "rp_id must be lowercase ASCII without scheme or port",
            ))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for RpId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// One FIDO2 credential. The public key is always derived from the private
/// scalar, so the pair cannot drift apart.
pub struct CredentialRecord {
    credential_id: CredentialId,
    rp_id: RpId,
    user_handle: Vec<u8>,
    user_name: String,
    private_key: Zeroizing<[u8; 32]>,
    sign_counter: u32,
    created_at: u64,
}

impl Clone for CredentialRecord {
    fn clone(&self) -> Self {
        Self {
            credential_id: self.credential_id,
            rp_id: self.rp_id.clone(),
            user_handle: self.user_handle.clone(),
            user_name: self.user_name.clone(),
            private_key: self.private_key.clone(),
            sign_counter: self.sign_counter,
            created_at: self.created_at,
        }
    }
}

impl std::fmt::Debug for CredentialRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CredentialRecord")
            .field("credential_id", &self.credential_id)
            .field("rp_id", &self.rp_id)
            .field("sign_counter", &self.sign_counter)
            .finish_non_exhaustive()
    }
}

impl CredentialRecord {
    /// Generate a fresh P-256 credential for `rp_id`.
    pub fn generate(
        rp_id: RpId,
        user_handle: Vec<u8>,
        user_name: String,
        rng: &mut (impl RngCore + rand::CryptoRng),
        now_ms: u64,
    ) -> Result<Self, StoreError> {
        if user_handle.len() > 64 {
            return Err(StoreError::InvalidRecord("user_handle exceeds 64 bytes"));
        }
        let key = SigningKey::random(rng);
        let mut id = [0u8; 16];
        rng.fill_bytes(&mut id);
        Ok(Self {
            credential_id: CredentialId(id),
            rp_id,
            user_handle,
            user_name,
            private_key: Zeroizing::new(key.to_bytes().into()),
            sign_counter: 0,
            created_at: now_ms,
        })
    }

    pub fn credential_id(&self) -> CredentialId {
        self.credential_id
    }

    pub fn rp_id(&self) -> &RpId {
        &self.rp_id
    }

    pub fn user_handle(&self) -> &[u8] {
        &self.user_handle
    }

    pub fn user_name(&self) -> &str {
        &self.user_name
    }

    pub fn sign_counter(&self) -> u32 {
        self.sign_counter
    }

    pub fn created_at(&self) -> u64 {
        self.created_at
    }

    pub fn public_key(&self) -> VerifyingKey {
        *self.signing_key().verifying_key()
    }

    pub(crate) fn signing_key(&self) -> SigningKey {
        SigningKey::from_bytes(self.private_key.as_ref().into())
            .expect("stored scalar was validated at construction")
    }

    /// Counters only move forward.
    pub(crate) fn bump_counter(&mut self) -> u32 {
        self.sign_counter += 1;
        self.sign_counter
    }
}

/// Deletion marker carried in the store so removal propagates across
/// devices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tombstone {
    pub credential_id: CredentialId,
    pub deleted_at: u64,
}

/// Plaintext of one sealed record.
#[derive(Debug, Clone)]
pub enum RecordBody {
    Credential(CredentialRecord),
    Tombstone(Tombstone),
}

impl RecordBody {
    pub fn credential_id(&self) -> CredentialId {
        match self {
            RecordBody::Credential(c) => c.credential_id,
            RecordBody::Tombstone(t) => t.credential_id,
        }
    }
}

/// AEAD-sealed record: 12-byte nonce, ciphertext+tag, and the associated
/// data it was sealed with (`store_id ∥ be32(index) ∥ version byte`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedRecord {
    pub nonce: [u8; 12],
    pub ciphertext: Vec<u8>,
    pub aad: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreMode {
    Baseline,
    Hardened,
}

/// Auxiliary parameters a hardened store carries: which OPRF key it was
/// enrolled against, the PIN-stretching cost, and (after a rotation) the
/// random master key sealed under the derived hardened key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardenedParams {
    pub key_id: [u8; 8],
    pub stretch: StretchParams,
    pub sealed_master: Option<SealedMaster>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedMaster {
    pub nonce: [u8; 12],
    pub ciphertext: Vec<u8>,
}

/// What the store carries to re-establish the master key at unlock.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MasterRef {
    /// Baseline derivation: nothing stored, the key is a pure function of
    /// the token.
    Derived,
    /// Token-wrapped random key.
    Wrapped(WrappedMasterKey),
    /// OPRF-hardened derivation.
    Hardened(HardenedParams),
}

/// The synchronizable collection of sealed records — the only thing the
/// cloud or disk ever holds.
#[derive(Debug, Clone)]
pub struct EncryptedStore {
    store_id: [u8; 16],
    version: u64,
    mode: StoreMode,
    master_ref: MasterRef,
    records: Vec<EncryptedRecord>,
}

impl EncryptedStore {
    pub fn new(mode: StoreMode, master_ref: MasterRef) -> Self {
        let mut store_id = [0u8; 16];
        OsRng.fill_bytes(&mut store_id);
        Self::with_id(store_id, mode, master_ref)
    }

    pub fn with_id(store_id: [u8; 16], mode: StoreMode, master_ref: MasterRef) -> Self {
        Self { store_id, version: 1, mode, master_ref, records: Vec::new() }
    }

    pub fn store_id(&self) -> [u8; 16] {
        self.store_id
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn mode(&self) -> StoreMode {
        self.mode
    }

    pub fn master_ref(&self) -> &MasterRef {
        &self.master_ref
    }

    pub fn records(&self) -> &[EncryptedRecord] {
        &self.records
    }

    /// Replace the master reference (enrollment of a wrapped key, rotation).
    pub fn set_master_ref(&mut self, master_ref: MasterRef) {
        self.master_ref = master_ref;
        self.version += 1;
    }

    pub(crate) fn set_version(&mut self, version: u64) {
        self.version = version;
    }

    pub(crate) fn replace_records(&mut self, records: Vec<EncryptedRecord>) {
        self.records = records;
    }
}

// ---------------------------------------------------------------------------
// Sealing and opening
// ---------------------------------------------------------------------------

pub(crate) fn record_aad(store_id: &[u8; 16], index: usize) -> Vec<u8> {
    let mut aad = Vec::with_capacity(21);
    aad.extend_from_slice(store_id);
    aad.extend_from_slice(&(index as u32).to_be_bytes());
    aad.push(STORE_FORMAT_VERSION);
    aad
}

fn cipher_for(master: &MasterKey) -> Aes256Gcm {
    Aes256Gcm::new(&Key::<Aes256Gcm>::from(*master.as_bytes()))
}

pub(crate) fn seal_body(
    master: &MasterKey,
    body: &RecordBody,
    store_id: &[u8; 16],
    index: usize,
) -> EncryptedRecord {
    let aad = record_aad(store_id, index);
    let mut nonce = [0u8; 12];
    OsRng.fill_bytes(&mut nonce);
    let mut plain = encode_body(body);
    let ciphertext = cipher_for(master)
        .encrypt(&Nonce::from(nonce), Payload { msg: &plain, aad: &aad })
        .expect("AES-GCM encryption of valid records cannot fail");
    plain.zeroize();
    EncryptedRecord { nonce, ciphertext, aad }
}

/// Open one sealed record, authenticating against the associated data it
/// carries. Position binding is enforced separately by [`UnlockedStore`].
pub fn open_record(master: &MasterKey, enc: &EncryptedRecord) -> Result<RecordBody, StoreError> {
    let plain = cipher_for(master)
        .decrypt(
            &Nonce::from(enc.nonce),
            Payload { msg: &enc.ciphertext, aad: &enc.aad },
        )
        .map_err(|_| StoreError::DecryptFailed)?;
    let plain = Zeroizing::new(plain);
    decode_body(&plain)
}

/// Open a record that must be a credential.
pub fn open_credential(
    master: &MasterKey,
    enc: &EncryptedRecord,
) -> Result<CredentialRecord, StoreError> {
    match open_record(master, enc)? {
        RecordBody::Credential(c) => Ok(c),
        RecordBody::Tombstone(_) => Err(StoreError::CorruptRecord("expected credential body")),
    }
}

/// Append a freshly sealed credential record; bumps the store version.
pub fn seal_credential(master: &MasterKey, rec: &CredentialRecord, store: &mut EncryptedStore) {
    let body = RecordBody::Credential(rec.clone());
    let sealed = seal_body(master, &body, &store.store_id, store.records.len());
    store.records.push(sealed);
    store.version += 1;
}

/// Remove a credential and append a tombstone so the deletion propagates.
/// Records after the removed one are re-sealed because their position (and
/// therefore their associated data) changes.
pub fn delete_credential(
    master: &MasterKey,
    store: &mut EncryptedStore,
    credential_id: CredentialId,
    now_ms: u64,
) -> Result<(), StoreError> {
    let bodies = open_all(master, store)?;
    let target = bodies
        .iter()
        .position(|b| matches!(b, RecordBody::Credential(c) if c.credential_id == credential_id))
        .ok_or(StoreError::NotFound)?;

    let mut records = Vec::with_capacity(store.records.len());
    let mut kept = 0usize;
    for (i, body) in bodies.iter().enumerate() {
        if i == target {
            continue;
        }
        if i < target {
            records.push(store.records[i].clone());
        } else {
            records.push(seal_body(master, body, &store.store_id, kept));
        }
        kept += 1;
    }
    let tomb = RecordBody::Tombstone(Tombstone { credential_id, deleted_at: now_ms });
    records.push(seal_body(master, &tomb, &store.store_id, kept));
    store.records = records;
    store.version += 1;
    Ok(())
}

pub(crate) fn open_all(
    master: &MasterKey,
    store: &EncryptedStore,
) -> Result<Vec<RecordBody>, StoreError> {
    store
        .records
        .iter()
        .enumerate()
        .map(|(i, enc)| {
            if enc.aad != record_aad(&store.store_id, i) {
                return Err(StoreError::DecryptFailed);
            }
            open_record(master, enc)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Unlock
// ---------------------------------------------------------------------------

/// What a hardened unlock needs on top of the token: a way to reach the OPRF
/// server and the user's verification PIN.
pub struct HardenedUnlock<'a> {
    pub evaluator: &'a dyn OprfEvaluator,
    pub pin: &'a str,
}

/// The in-memory state of an unlocked authenticator. `plaintext[i]` is the
/// decryption of `encrypted().records()[i]`; the two stay index-aligned
/// through every mutation.
pub struct UnlockedStore {
    master: MasterKey,
    plaintext: Vec<RecordBody>,
    backing: EncryptedStore,
}

impl UnlockedStore {
    /// Decrypt every record or fail without exposing anything (partial
    /// failure opens nothing).
    pub fn open(master: MasterKey, store: &EncryptedStore) -> Result<Self, StoreError> {
        let plaintext = open_all(&master, store)?;
        Ok(Self { master, plaintext, backing: store.clone() })
    }

    pub fn master(&self) -> &MasterKey {
        &self.master
    }

    pub fn encrypted(&self) -> &EncryptedStore {
        &self.backing
    }

    pub fn into_encrypted(self) -> EncryptedStore {
        self.backing
    }

    pub fn plaintext(&self) -> &[RecordBody] {
        &self.plaintext
    }

    pub fn credentials(&self) -> impl Iterator<Item = &CredentialRecord> {
        self.plaintext.iter().filter_map(|b| match b {
            RecordBody::Credential(c) => Some(c),
            RecordBody::Tombstone(_) => None,
        })
    }

    pub fn tombstones(&self) -> impl Iterator<Item = &Tombstone> {
        self.plaintext.iter().filter_map(|b| match b {
            RecordBody::Tombstone(t) => Some(t),
            RecordBody::Credential(_) => None,
        })
    }

    /// Indices of credential records matching `rp_id`.
    pub fn credentials_for_rp(&self, rp_id: &RpId) -> Vec<usize> {
        self.plaintext
            .iter()
            .enumerate()
            .filter_map(|(i, b)| match b {
                RecordBody::Credential(c) if c.rp_id == *rp_id => Some(i),
                _ => None,
            })
            .collect()
    }

    pub fn credential_at(&self, index: usize) -> Option<&CredentialRecord> {
        match self.plaintext.get(index) {
            Some(RecordBody::Credential(c)) => Some(c),
            _ => None,
        }
    }

    pub(crate) fn push_credential(&mut self, rec: CredentialRecord) {
        seal_credential(&self.master, &rec, &mut self.backing);
        self.plaintext.push(RecordBody::Credential(rec));
    }

    /// Increment the sign counter of the credential at `index`, re-sealing
    /// the record in place (fresh nonce) before the new value is returned.
    pub(crate) fn bump_counter_at(&mut self, index: usize) -> u32 {
        let RecordBody::Credential(cred) = &mut self.plaintext[index] else {
            panic!("bump_counter_at on a tombstone");
        };
        let value = cred.bump_counter();
        let body = self.plaintext[index].clone();
        self.backing.records[index] =
            seal_body(&self.master, &body, &self.backing.store_id, index);
        self.backing.version += 1;
        value
    }
}

/// The unlock procedure: recover the master key by the mode-appropriate
/// path, then decrypt every record. Nothing is exposed on partial failure.
pub fn unlock(
    token: &TokenHandle,
    session: &TokenSession,
    store: &EncryptedStore,
    hardened: Option<&HardenedUnlock<'_>>,
) -> Result<UnlockedStore, UnlockError> {
    let master = recover_master(token, session, store, hardened)?;
    UnlockedStore::open(master, store).map_err(|e| match e {
        StoreError::DecryptFailed => UnlockError::DecryptFailed,
        other => UnlockError::CorruptStore(other.to_string()),
    })
}

/// Master-key recovery half of the unlock procedure.
pub fn recover_master(
    token: &TokenHandle,
    session: &TokenSession,
    store: &EncryptedStore,
    hardened: Option<&HardenedUnlock<'_>>,
) -> Result<MasterKey, UnlockError> {
    match store.master_ref() {
        MasterRef::Derived => Ok(derive_master_baseline(token, session)?),
        MasterRef::Wrapped(wmk) => {
            recover_master_wrapped(token, session, wmk).map_err(|e| match e {
                TokenError::UnwrapFailed => UnlockError::DecryptFailed,
                other => UnlockError::Token(other),
            })
        }
        MasterRef::Hardened(params) => {
            let ctx = hardened.ok_or(UnlockError::OprfUnavailable)?;
            let x = oprf::derive_verification_input(ctx.pin, &store.store_id, &params.stretch)
                .map_err(UnlockError::Token)?;
            let y = oprf::run_client(ctx.evaluator, &x, labels::MASTER_LABEL, params.key_id)
                .map_err(|e| match e {
                    OprfError::Unavailable(_) => UnlockError::OprfUnavailable,
                    other => UnlockError::Oprf(other),
                })?;
            let digest: [u8; 32] = sha2::Sha256::digest(labels::MASTER_LABEL).into();
            let sigma = token.sign_deterministic(session, &digest)?.sigma;
            let derived = derive_master_hardened_from_sigma(&sigma, &y);
            match &params.sealed_master {
                None => Ok(derived),
                Some(sealed) => open_sealed_master(&derived, sealed, &store.store_id)
                    .ok_or(UnlockError::DecryptFailed),
            }
        }
    }
}

use sha2::Digest;

const SEALED_MASTER_AAD_SUFFIX: &[u8] = b"vfa/sealed-master/v1";

fn sealed_master_aad(store_id: &[u8; 16]) -> Vec<u8> {
    let mut aad = store_id.to_vec();
    aad.extend_from_slice(SEALED_MASTER_AAD_SUFFIX);
    aad
}

/// Seal a (rotated) random master key under the hardened derived key.
pub fn seal_master_under(
    derived: &MasterKey,
    master: &MasterKey,
    store_id: &[u8; 16],
) -> SealedMaster {
    let mut nonce = [0u8; 12];
    OsRng.fill_bytes(&mut nonce);
    let aad = sealed_master_aad(store_id);
    let ciphertext = cipher_for(derived)
        .encrypt(
            &Nonce::from(nonce),
            Payload { msg: master.as_bytes(), aad: &aad },
        )
        .expect("AES-GCM encryption cannot fail");
    SealedMaster { nonce, ciphertext }
}

fn open_sealed_master(
    derived: &MasterKey,
    sealed: &SealedMaster,
    store_id: &[u8; 16],
) -> Option<MasterKey> {
    let aad = sealed_master_aad(store_id);
    let plain = cipher_for(derived)
        .decrypt(
            &Nonce::from(sealed.nonce),
            Payload { msg: &sealed.ciphertext, aad: &aad },
        )
        .ok()?;
    let bytes: [u8; 32] = plain.as_slice().try_into().ok()?;
    Some(MasterKey::from_bytes(
        bytes,
        crate::key_hierarchy::KeyOrigin::DerivedHardened,
    ))
}

// ---------------------------------------------------------------------------
// Record body wire format (inside the AEAD)
// ---------------------------------------------------------------------------

const BODY_KIND_CREDENTIAL: u8 = 0;
const BODY_KIND_TOMBSTONE: u8 = 1;

#[derive(Serialize, Deserialize)]
struct BodyWire {
    kind: u8,
    #[serde(with = "serde_bytes")]
    id: Vec<u8>,
    rp: String,
    #[serde(with = "serde_bytes")]
    uh: Vec<u8>,
    un: String,
    #[serde(with = "serde_bytes")]
    sk: Vec<u8>,
    #[serde(with = "serde_bytes")]
    pk: Vec<u8>,
    ctr: u32,
    at: u64,
    dat: u64,
}

fn encode_body(body: &RecordBody) -> Vec<u8> {
    let wire = match body {
        RecordBody::Credential(c) => BodyWire {
            kind: BODY_KIND_CREDENTIAL,
            id: c.credential_id.0.to_vec(),
            rp: c.rp_id.0.clone(),
            uh: c.user_handle.clone(),
            un: c.user_name.clone(),
            sk: c.private_key.to_vec(),
            pk: c.public_key().to_encoded_point(false).as_bytes().to_vec(),
            ctr: c.sign_counter,
            at: c.created_at,
            dat: 0,
        },
        RecordBody::Tombstone(t) => BodyWire {
            kind: BODY_KIND_TOMBSTONE,
            id: t.credential_id.0.to_vec(),
            rp: String::new(),
            uh: Vec::new(),
            un: String::new(),
            sk: Vec::new(),
            pk: Vec::new(),
            ctr: 0,
            at: 0,
            dat: t.deleted_at,
        },
    };
    let mut out = Vec::new();
    ciborium::into_writer(&wire, &mut out).expect("CBOR to vec cannot fail");
    out
}

/// Decode and validate a record body. Public so that harnesses can exercise
/// the parser directly; in normal operation the input always comes from a
/// successful AEAD open.
pub fn decode_body(bytes: &[u8]) -> Result<RecordBody, StoreError> {
    let wire: BodyWire =
        ciborium::from_reader(bytes).map_err(|_| StoreError::CorruptRecord("bad CBOR"))?;
    let id: [u8; 16] = wire
        .id
        .as_slice()
        .try_into()
        .map_err(|_| StoreError::CorruptRecord("bad credential id length"))?;
    match wire.kind {
        BODY_KIND_TOMBSTONE => Ok(RecordBody::Tombstone(Tombstone {
            credential_id: CredentialId(id),
            deleted_at: wire.dat,
        })),
        BODY_KIND_CREDENTIAL => {
            let rp_id = RpId::new(&wire.rp)
                .map_err(|_| StoreError::CorruptRecord("non-canonical rp_id"))?;
            if wire.uh.len() > 64 {
                return Err(StoreError::CorruptRecord("user_handle exceeds 64 bytes"));
            }
            let sk: [u8; 32] = wire
                .sk
                .as_slice()
                .try_into()
                .map_err(|_| StoreError::CorruptRecord("bad private scalar length"))?;
            let signing = SigningKey::from_bytes(&sk.into())
                .map_err(|_| StoreError::CorruptRecord("private scalar out of range"))?;
            // The stored public key must be the scalar's own point.
            let derived = signing.verifying_key().to_encoded_point(false);
            if derived.as_bytes() != wire.pk.as_slice() {
                return Err(StoreError::CorruptRecord("public key does not match scalar"));
            }
            Ok(RecordBody::Credential(CredentialRecord {
                credential_id: CredentialId(id),
                rp_id,
                user_handle: wire.uh,
                user_name: wire.un,
                private_key: Zeroizing::new(sk),
                sign_counter: wire.ctr,
                created_at: wire.at,
            }))
        }
        _ => Err(StoreError::CorruptRecord("unknown body kind")),
    }
}

// ---------------------------------------------------------------------------
// Envelope (file + wire) format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct StoreWire {
    #[serde(with = "serde_bytes")]
    store_id: Vec<u8>,
    version: u64,
    mode: u64,
    wrapped_master: Option<serde_bytes::ByteBuf>,
    records: Vec<RecordWire>,
}

#[derive(Serialize, Deserialize)]
struct RecordWire {
    #[serde(with = "serde_bytes")]
    nonce: Vec<u8>,
    #[serde(with = "serde_bytes")]
    ct: Vec<u8>,
    #[serde(with = "serde_bytes")]
    aad: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct WrappedWire {
    #[serde(with = "serde_bytes")]
    blob: Vec<u8>,
    created_at: u64,
}

#[derive(Serialize, Deserialize)]
struct HardenedWire {
    #[serde(with = "serde_bytes")]
    key_id: Vec<u8>,
    stretch: StretchParams,
    sealed: Option<SealedMasterWire>,
}

#[derive(Serialize, Deserialize)]
struct SealedMasterWire {
    #[serde(with = "serde_bytes")]
    nonce: Vec<u8>,
    #[serde(with = "serde_bytes")]
    ct: Vec<u8>,
}

/// Serialize the store to its `VFAS` envelope (also the sync wire payload).
pub fn store_to_bytes(store: &EncryptedStore) -> Vec<u8> {
    let wrapped_master = match &store.master_ref {
        MasterRef::Derived => None,
        MasterRef::Wrapped(wmk) => {
            let wire = WrappedWire { blob: wmk.blob.0.clone(), created_at: wmk.created_at };
            let mut buf = Vec::new();
            ciborium::into_writer(&wire, &mut buf).expect("CBOR to vec cannot fail");
            Some(serde_bytes::ByteBuf::from(buf))
        }
        MasterRef::Hardened(p) => {
            let wire = HardenedWire {
                key_id: p.key_id.to_vec(),
                stretch: p.stretch,
                sealed: p.sealed_master.as_ref().map(|s| SealedMasterWire {
                    nonce: s.nonce.to_vec(),
                    ct: s.ciphertext.clone(),
                }),
            };
            let mut buf = Vec::new();
            ciborium::into_writer(&wire, &mut buf).expect("CBOR to vec cannot fail");
            Some(serde_bytes::ByteBuf::from(buf))
        }
    };
    let wire = StoreWire {
        store_id: store.store_id.to_vec(),
        version: store.version,
        mode: match store.mode {
            StoreMode::Baseline => 0,
            StoreMode::Hardened => 1,
        },
        wrapped_master,
        records: store
            .records
            .iter()
            .map(|r| RecordWire {
                nonce: r.nonce.to_vec(),
                ct: r.ciphertext.clone(),
                aad: r.aad.clone(),
            })
            .collect(),
    };
    let mut out = Vec::new();
    out.extend_from_slice(STORE_MAGIC);
    out.push(STORE_FORMAT_VERSION);
    ciborium::into_writer(&wire, &mut out).expect("CBOR to vec cannot fail");
    out
}

/// Parse a `VFAS` envelope. This input is untrusted (it may come from the
/// sync server), so every field is length- and consistency-checked.
pub fn store_from_bytes(bytes: &[u8]) -> Result<EncryptedStore, StoreError> {
    if bytes.len() < 5 || &bytes[0..4] != STORE_MAGIC {
        return Err(StoreError::CorruptStore("bad magic".into()));
    }
    if bytes[4] != STORE_FORMAT_VERSION {
        return Err(StoreError::CorruptStore(format!(
            "unsupported store format version 0x{:02x}",
            bytes[4]
        )));
    }
    let wire: StoreWire = ciborium::from_reader(&bytes[5..])
        .map_err(|e| StoreError::CorruptStore(format!("bad CBOR: {e}")))?;
    let store_id: [u8; 16] = wire
        .store_id
        .as_slice()
        .try_into()
        .map_err(|_| StoreError::CorruptStore("bad store id length".into()))?;
    let mode = match wire.mode {
        0 => StoreMode::Baseline,
        1 => StoreMode::Hardened,
        other => {
            return Err(StoreError::CorruptStore(format!("unknown mode {other}")));
        }
    };
    let master_ref = match (mode, wire.wrapped_master) {
        (StoreMode::Baseline, None) => MasterRef::Derived,
        (StoreMode::Baseline, Some(buf)) => {
            let w: WrappedWire = ciborium::from_reader(buf.as_slice())
                .map_err(|_| StoreError::CorruptStore("bad wrapped master".into()))?;
            MasterRef::Wrapped(WrappedMasterKey {
                blob: WrappedBlob(w.blob),
                created_at: w.created_at,
            })
        }
        (StoreMode::Hardened, Some(buf)) => {
            let w: HardenedWire = ciborium::from_reader(buf.as_slice())
                .map_err(|_| StoreError::CorruptStore("bad hardened params".into()))?;
            let key_id: [u8; 8] = w
                .key_id
                .as_slice()
                .try_into()
                .map_err(|_| StoreError::CorruptStore("bad OPRF key id length".into()))?;
            let sealed_master = match w.sealed {
                None => None,
                Some(s) => Some(SealedMaster {
                    nonce: s
                        .nonce
                        .as_slice()
                        .try_into()
                        .map_err(|_| StoreError::CorruptStore("bad nonce length".into()))?,
                    ciphertext: s.ct,
                }),
            };
            MasterRef::Hardened(HardenedParams { key_id, stretch: w.stretch, sealed_master })
        }
        (StoreMode::Hardened, None) => {
            return Err(StoreError::CorruptStore(
                "hardened store missing parameters".into(),
            ));
        }
    };
    let mut records = Vec::with_capacity(wire.records.len());
    for r in wire.records {
        records.push(EncryptedRecord {
            nonce: r
                .nonce
                .as_slice()
                .try_into()
                .map_err(|_| StoreError::CorruptStore("bad record nonce length".into()))?,
            ciphertext: r.ct,
            aad: r.aad,
        });
    }
    Ok(EncryptedStore { store_id, version: wire.version, mode, master_ref, records })
}

pub fn save_store(store: &EncryptedStore, path: &std::path::Path) -> Result<(), StoreError> {
    std::fs::write(path, store_to_bytes(store))
        .map_err(|e| StoreError::CorruptStore(format!("write failed: {e}")))
}

pub fn load_store(path: &std::path::Path) -> Result<EncryptedStore, StoreError> {
    let bytes = std::fs::read(path)
        .map_err(|e| StoreError::CorruptStore(format!("read failed: {e}")))?;
    store_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::key_hierarchy::KeyOrigin;
    use rand::rngs::OsRng;

    fn master(byte: u8) -> MasterKey {
        MasterKey::from_bytes([byte; 32], KeyOrigin::Unwrapped)
    }

    fn record(rp: &str) -> CredentialRecord {
        CredentialRecord::generate(
            RpId::new(rp).unwrap(),
            b"user".to_vec(),
            "alice".into(),
            &mut OsRng,
            1_000,
        )
        .unwrap()
    }

    #[test]
    fn positional_aad_detects_swapped_records() {
        let k = master(1);
        let mut store = EncryptedStore::new(StoreMode::Baseline, MasterRef::Derived);
        seal_credential(&k, &record("a.example"), &mut store);
        seal_credential(&k, &record("b.example"), &mut store);
        store.records.swap(0, 1);
        assert!(matches!(
            UnlockedStore::open(k, &store),
            Err(StoreError::DecryptFailed)
        ));
    }

    #[test]
    fn version_increases_on_every_mutation() {
        let k = master(2);
        let mut store = EncryptedStore::new(StoreMode::Baseline, MasterRef::Derived);
        let mut last = store.version();
        let rec = record("a.example");
        seal_credential(&k, &rec, &mut store);
        assert!(store.version() > last);
        last = store.version();
        delete_credential(&k, &mut store, rec.credential_id(), 2_000).unwrap();
        assert!(store.version() > last);
    }

    #[test]
    fn delete_keeps_tombstone_and_reindexes_suffix() {
        let k = master(3);
        let mut store = EncryptedStore::new(StoreMode::Baseline, MasterRef::Derived);
        let first = record("a.example");
        let second = record("b.example");
        seal_credential(&k, &first, &mut store);
        seal_credential(&k, &second, &mut store);
        delete_credential(&k, &mut store, first.credential_id(), 5_000).unwrap();

        let unlocked = UnlockedStore::open(k, &store).unwrap();
        let creds: Vec<_> = unlocked.credentials().collect();
        assert_eq!(creds.len(), 1);
        assert_eq!(creds[0].credential_id(), second.credential_id());
        let tombs: Vec<_> = unlocked.tombstones().collect();
        assert_eq!(tombs.len(), 1);
        assert_eq!(tombs[0].credential_id, first.credential_id());
        assert_eq!(tombs[0].deleted_at, 5_000);
    }

    #[test]
    fn sealed_master_roundtrip() {
        let derived = master(4);
        let inner = master(5);
        let store_id = [9u8; 16];
        let sealed = seal_master_under(&derived, &inner, &store_id);
        let opened = open_sealed_master(&derived, &sealed, &store_id).unwrap();
        assert_eq!(opened.as_bytes(), inner.as_bytes());
        assert!(open_sealed_master(&master(6), &sealed, &store_id).is_none());
    }
}
