//! Ciphertext-only cloud synchronization.
//!
//! The server is a versioned blob store: it authenticates bearers, compares
//! and swaps on an expected version, and never parses past the store
//! envelope — record bodies are opaque ciphertext to every server code
//! path. Conflict resolution is client-side: pull, merge record-wise, push
//! again.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::rngs::OsRng;
use rand::RngCore;
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;

use crate::cred_store::{
    self, store_from_bytes, store_to_bytes, EncryptedStore, HardenedUnlock, RecordBody,
    StoreError, UnlockError, UnlockedStore,
};
use crate::key_hierarchy::MasterKey;
use crate::soft_token::{TokenHandle, TokenSession};

/// How long tombstones ride along in the store before merge compacts them.
pub const TOMBSTONE_RETENTION_MS: u64 = 30 * 24 * 60 * 60 * 1000;

#[derive(Debug, thiserror::Error)]
pub enum SyncError {
    #[error("version conflict: server is at {current}")]
    VersionConflict { current: u64 },
    #[error("unauthorized")]
    Unauthorized,
    #[error("no store uploaded for this user")]
    NotFound,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error(transparent)]
    Corrupt(#[from] StoreError),
}

#[derive(Debug, thiserror::Error)]
pub enum OnboardError {
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error(transparent)]
    Unlock(#[from] UnlockError),
}

/// Bearer credential for blob access. Carries no decryption capability:
/// it is drawn from the OS RNG, never from the key hierarchy.
#[derive(Debug, Clone)]
pub struct SyncCredential {
    pub user_id: String,
    pub bearer_secret: [u8; 32],
}

impl SyncCredential {
    pub fn random(user_id: impl Into<String>) -> Self {
        let mut bearer_secret = [0u8; 32];
        OsRng.fill_bytes(&mut bearer_secret);
        Self { user_id: user_id.into(), bearer_secret }
    }
}

struct UserBlob {
    bytes: Vec<u8>,
    version: u64,
    etag: [u8; 16],
}

/// The blob server. Holds `user → (bytes, version, etag)` and the allowed
/// bearer per user; nothing else.
#[derive(Default)]
pub struct SyncServer {
    blobs: Mutex<HashMap<String, UserBlob>>,
    bearers: Mutex<HashMap<String, [u8; 32]>>,
}

impl SyncServer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_user(&self, cred: &SyncCredential) {
        self.bearers
            .lock()
            .expect("sync server poisoned")
            .insert(cred.user_id.clone(), cred.bearer_secret);
    }

    fn authorize(&self, user_id: &str, bearer: &[u8]) -> Result<(), SyncError> {
        let bearers = self.bearers.lock().expect("sync server poisoned");
        let expected = bearers.get(user_id).ok_or(SyncError::Unauthorized)?;
        if expected.ct_eq(bearer).into() {
            Ok(())
        } else {
            Err(SyncError::Unauthorized)
        }
    }

    /// Compare-and-swap upload. `expected_version` 0 means first upload.
    pub fn put(
        &self,
        user_id: &str,
        bearer: &[u8],
        bytes: Vec<u8>,
        expected_version: u64,
    ) -> Result<u64, SyncError> {
        self.authorize(user_id, bearer)?;
        let mut blobs = self.blobs.lock().expect("sync server poisoned");
        let current = blobs.get(user_id).map(|b| b.version).unwrap_or(0);
        if current != expected_version {
            return Err(SyncError::VersionConflict { current });
        }
        let etag: [u8; 16] = Sha256::digest(&bytes)[..16].try_into().unwrap();
        blobs.insert(
            user_id.to_string(),
            UserBlob { bytes, version: current + 1, etag },
        );
        Ok(current + 1)
    }

    /// Returns the exact bytes last pushed.
    pub fn get(&self, user_id: &str, bearer: &[u8]) -> Result<(Vec<u8>, u64), SyncError> {
        self.authorize(user_id, bearer)?;
        let blobs = self.blobs.lock().expect("sync server poisoned");
        let blob = blobs.get(user_id).ok_or(SyncError::NotFound)?;
        Ok((blob.bytes.clone(), blob.version))
    }

    pub fn etag(&self, user_id: &str) -> Option<[u8; 16]> {
        self.blobs
            .lock()
            .expect("sync server poisoned")
            .get(user_id)
            .map(|b| b.etag)
    }

    /// Everything a server-side adversary could exfiltrate.
    pub fn dump(&self) -> Vec<(String, u64, Vec<u8>)> {
        self.blobs
            .lock()
            .expect("sync server poisoned")
            .iter()
            .map(|(user, blob)| (user.clone(), blob.version, blob.bytes.clone()))
            .collect()
    }
}

/// Client view of a sync endpoint, independent of transport.
pub trait SyncTransport {
    fn pull(&self) -> Result<(Vec<u8>, u64), SyncError>;
    fn push(&self, bytes: &[u8], expected_version: u64) -> Result<u64, SyncError>;
}

/// In-process transport for deterministic tests and demos.
pub struct InProcessSync {
    pub server: Arc<SyncServer>,
    pub cred: SyncCredential,
}

impl SyncTransport for InProcessSync {
    fn pull(&self) -> Result<(Vec<u8>, u64), SyncError> {
        self.server.get(&self.cred.user_id, &self.cred.bearer_secret)
    }

    fn push(&self, bytes: &[u8], expected_version: u64) -> Result<u64, SyncError> {
        self.server.put(
            &self.cred.user_id,
            &self.cred.bearer_secret,
            bytes.to_vec(),
            expected_version,
        )
    }
}

/// Upload the store envelope, expecting the server at `expected_version`.
pub fn push_store(
    transport: &dyn SyncTransport,
    store: &EncryptedStore,
    expected_version: u64,
) -> Result<u64, SyncError> {
    transport.push(&store_to_bytes(store), expected_version)
}

/// Download and parse the current envelope.
pub fn pull_store(transport: &dyn SyncTransport) -> Result<(EncryptedStore, u64), SyncError> {
    let (bytes, version) = transport.pull()?;
    Ok((store_from_bytes(&bytes)?, version))
}

/// New-device onboarding: download the encrypted store, recover the master
/// key through the (same-seed) token, decrypt, and hand back a usable
/// authenticator state.
pub fn onboard_new_device(
    token: &TokenHandle,
    session: &TokenSession,
    transport: &dyn SyncTransport,
    hardened: Option<&HardenedUnlock<'_>>,
) -> Result<UnlockedStore, OnboardError> {
    let (store, _version) = pull_store(transport)?;
    Ok(cred_store::unlock(token, session, &store, hardened)?)
}

/// Record-level merge of two stores sealed under the same master key.
///
/// Union keyed by credential id; when both sides carry a credential the copy
/// with the higher sign counter wins. Deletions propagate only via
/// tombstones, which beat any surviving copy and are compacted after
/// [`TOMBSTONE_RETENTION_MS`]. Output ordering is deterministic, so merging
/// in either direction yields the same plaintext sequence.
pub fn merge_stores(
    master: &MasterKey,
    local: &EncryptedStore,
    remote: &EncryptedStore,
    now_ms: u64,
) -> Result<EncryptedStore, StoreError> {
    let local_bodies = cred_store::open_all(master, local)?;
    let remote_bodies = cred_store::open_all(master, remote)?;

    let mut tombstones: HashMap<[u8; 16], u64> = HashMap::new();
    let mut credentials: HashMap<[u8; 16], cred_store::CredentialRecord> = HashMap::new();

    for body in local_bodies.into_iter().chain(remote_bodies) {
        match body {
            RecordBody::Tombstone(t) => {
                let entry = tombstones.entry(t.credential_id.0).or_insert(t.deleted_at);
                *entry = (*entry).max(t.deleted_at);
            }
            RecordBody::Credential(c) => {
                let id = c.credential_id().0;
                match credentials.entry(id) {
                    std::collections::hash_map::Entry::Vacant(v) => {
                        v.insert(c);
                    }
                    std::collections::hash_map::Entry::Occupied(mut o) => {
                        if better_copy(&c, o.get()) {
                            o.insert(c);
                        }
                    }
                }
            }
        }
    }

    // Tombstones win; expired tombstones are compacted away.
    credentials.retain(|id, _| !tombstones.contains_key(id));
    let mut tombs: Vec<cred_store::Tombstone> = tombstones
        .into_iter()
        .filter(|(_, deleted_at)| now_ms.saturating_sub(*deleted_at) < TOMBSTONE_RETENTION_MS)
        .map(|(id, deleted_at)| cred_store::Tombstone {
            credential_id: cred_store::CredentialId(id),
            deleted_at,
        })
        .collect();
    tombs.sort_by_key(|t| (t.deleted_at, t.credential_id));

    let mut creds: Vec<_> = credentials.into_values().collect();
    creds.sort_by_key(|c| (c.created_at(), c.credential_id()));

    let mut merged = EncryptedStore::with_id(local.store_id(), local.mode(), local.master_ref().clone());
    let mut bodies: Vec<RecordBody> = creds.into_iter().map(RecordBody::Credential).collect();
    bodies.extend(tombs.into_iter().map(RecordBody::Tombstone));
    let sealed: Vec<_> = bodies
        .iter()
        .enumerate()
        .map(|(i, b)| cred_store::seal_body(master, b, &local.store_id(), i))
        .collect();
    merged.replace_records(sealed);
    merged.set_version(local.version().max(remote.version()) + 1);
    Ok(merged)
}

/// Higher sign counter wins; ties break on creation time, then on the
/// serialized body so the choice is order-independent.
fn better_copy(a: &cred_store::CredentialRecord, b: &cred_store::CredentialRecord) -> bool {
    match (a.sign_counter(), a.created_at()).cmp(&(b.sign_counter(), b.created_at())) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => {
            // Identical provenance; any deterministic pick works.
            a.user_name() > b.user_name()
        }
    }
}

/// Push with compare-and-swap and client-side merge on conflict. Returns the
/// store as accepted by the server and the new server version.
pub fn sync_push_with_merge(
    transport: &dyn SyncTransport,
    store: &EncryptedStore,
    master: &MasterKey,
    now_ms: u64,
) -> Result<(EncryptedStore, u64), SyncError> {
    let mut candidate = store.clone();
    loop {
        let server_state = match transport.pull() {
            Ok((bytes, version)) => Some((store_from_bytes(&bytes)?, version)),
            Err(SyncError::NotFound) => None,
            Err(e) => return Err(e),
        };
        let (to_push, expected) = match server_state {
            None => (candidate.clone(), 0),
            Some((server_store, version)) => {
                (merge_stores(master, &candidate, &server_store, now_ms)?, version)
            }
        };
        match transport.push(&store_to_bytes(&to_push), expected) {
            Ok(new_version) => return Ok((to_push, new_version)),
            Err(SyncError::VersionConflict { .. }) => {
                candidate = to_push;
                continue;
            }
            Err(e) => return Err(e),
        }
    }
}
