//! Sync push/pull semantics, new-device onboarding, and merge scenarios.

mod common;

use std::sync::Arc;

use common::{seed, PIN, PUK};
use rand::rngs::OsRng;
use vfa_core::cred_store::{
    self, seal_credential, CredentialRecord, EncryptedStore, MasterRef, RpId, StoreMode,
    UnlockedStore,
};
use vfa_core::ctap::{self, GetAssertionParams, MakeCredentialParams};
use vfa_core::key_hierarchy::derive_master_baseline;
use vfa_core::soft_token::TokenHandle;
use vfa_core::sync::{
    merge_stores, onboard_new_device, pull_store, push_store, sync_push_with_merge,
    InProcessSync, OnboardError, SyncCredential, SyncError, SyncServer, SyncTransport,
};
use vfa_core::StretchParams;

use p256::ecdsa::signature::Verifier;
use p256::ecdsa::DerSignature;

fn device_token(byte: u8) -> TokenHandle {
    TokenHandle::create_with_params(PIN, PUK, &seed(byte), StretchParams::FAST).unwrap()
}

fn transport(server: &Arc<SyncServer>, cred: &SyncCredential) -> InProcessSync {
    InProcessSync { server: server.clone(), cred: cred.clone() }
}

fn mk_params(rp: &str, name: &str) -> MakeCredentialParams {
    MakeCredentialParams {
        client_data_hash: [7; 32],
        rp_id: RpId::new(rp).unwrap(),
        user_handle: name.as_bytes().to_vec(),
        user_name: name.into(),
        require_uv: true,
        exclude_list: vec![],
    }
}

#[test]
fn push_pull_version_bookkeeping() {
    let server = Arc::new(SyncServer::new());
    let cred = SyncCredential::random("alice");
    server.register_user(&cred);
    let t = transport(&server, &cred);

    assert!(matches!(t.pull(), Err(SyncError::NotFound)));

    let store = EncryptedStore::new(StoreMode::Baseline, MasterRef::Derived);
    assert_eq!(push_store(&t, &store, 0).unwrap(), 1);
    assert_eq!(push_store(&t, &store, 1).unwrap(), 2);
    assert_eq!(push_store(&t, &store, 2).unwrap(), 3);
    let (_, version) = pull_store(&t).unwrap();
    assert_eq!(version, 3);

    // Stale expected version conflicts and reports the current one.
    match push_store(&t, &store, 1) {
        Err(SyncError::VersionConflict { current }) => assert_eq!(current, 3),
        other => panic!("expected conflict, got {other:?}"),
    }

    // Wrong bearer is unauthorized.
    let imposter = SyncCredential { user_id: "alice".into(), bearer_secret: [0u8; 32] };
    let t2 = transport(&server, &imposter);
    assert!(matches!(t2.pull(), Err(SyncError::Unauthorized)));
}

#[test]
fn two_device_onboarding_end_to_end() {
    // Device A: enroll, register two credentials, push.
    let mut token_a = device_token(21);
    let session_a = token_a.open_session(PIN).unwrap();
    let master_a = derive_master_baseline(&token_a, &session_a).unwrap();
    let store = EncryptedStore::new(StoreMode::Baseline, MasterRef::Derived);
    let mut unlocked_a = UnlockedStore::open(master_a, &store).unwrap();

    let att_one = ctap::make_credential(&mut unlocked_a, &mk_params("one.example", "u"), 1).unwrap();
    let att_two = ctap::make_credential(&mut unlocked_a, &mk_params("two.example", "u"), 2).unwrap();

    let server = Arc::new(SyncServer::new());
    let cred = SyncCredential::random("alice");
    server.register_user(&cred);
    let t_a = transport(&server, &cred);
    push_store(&t_a, unlocked_a.encrypted(), 0).unwrap();

    // Device B: same token seed, fresh instance, onboard from the cloud.
    let mut token_b = device_token(21);
    let session_b = token_b.open_session(PIN).unwrap();
    let t_b = transport(&server, &cred);
    let mut unlocked_b = onboard_new_device(&token_b, &session_b, &t_b, None).unwrap();
    assert_eq!(unlocked_b.credentials().count(), 2);

    // Assertions from device B verify under the keys registered on device A.
    for (rp, att) in [("one.example", &att_one), ("two.example", &att_two)] {
        let asr = ctap::get_assertion(
            &mut unlocked_b,
            &GetAssertionParams {
                client_data_hash: [7; 32],
                rp_id: RpId::new(rp).unwrap(),
                allow_list: None,
            },
        )
        .unwrap();
        let key = vfa_core::cose::decode_es256(
            // attested COSE key starts after aaguid(16) + len(2) + id(16)
            &att.auth_data[37 + 16 + 2 + 16..],
        )
        .unwrap();
        let mut message = asr.auth_data.clone();
        message.extend_from_slice(&[7; 32]);
        let sig = DerSignature::from_bytes(&asr.signature).unwrap();
        key.verify(&message, &sig).expect("assertion verifies under registered key");
    }

    // Wrong-seed token cannot onboard.
    let mut token_c = device_token(22);
    let session_c = token_c.open_session(PIN).unwrap();
    assert!(matches!(
        onboard_new_device(&token_c, &session_c, &t_b, None),
        Err(OnboardError::Unlock(cred_store::UnlockError::DecryptFailed))
    ));
}

#[test]
fn onboarding_an_empty_store_succeeds_with_zero_credentials() {
    let mut token = device_token(23);
    let session = token.open_session(PIN).unwrap();
    let store = EncryptedStore::new(StoreMode::Baseline, MasterRef::Derived);

    let server = Arc::new(SyncServer::new());
    let cred = SyncCredential::random("alice");
    server.register_user(&cred);
    let t = transport(&server, &cred);
    push_store(&t, &store, 0).unwrap();

    let unlocked = onboard_new_device(&token, &session, &t, None).unwrap();
    assert_eq!(unlocked.credentials().count(), 0);
}

#[test]
fn concurrent_divergence_resolves_by_merge() {
    let master = vfa_core::key_hierarchy::MasterKey::from_bytes(
        [5u8; 32],
        vfa_core::key_hierarchy::KeyOrigin::Unwrapped,
    );
    let base = EncryptedStore::new(StoreMode::Baseline, MasterRef::Derived);

    let server = Arc::new(SyncServer::new());
    let cred = SyncCredential::random("alice");
    server.register_user(&cred);
    let t = transport(&server, &cred);
    push_store(&t, &base, 0).unwrap();

    // Both devices diverge from the same base.
    let mut store_a = base.clone();
    let mut store_b = base.clone();
    let rec_a = CredentialRecord::generate(
        RpId::new("a.example").unwrap(),
        b"u".to_vec(),
        "a".into(),
        &mut OsRng,
        10,
    )
    .unwrap();
    let rec_b = CredentialRecord::generate(
        RpId::new("b.example").unwrap(),
        b"u".to_vec(),
        "b".into(),
        &mut OsRng,
        20,
    )
    .unwrap();
    seal_credential(&master, &rec_a, &mut store_a);
    seal_credential(&master, &rec_b, &mut store_b);

    // A pushes first; B's plain CAS push conflicts, then merges and wins.
    let (_, v_a) = sync_push_with_merge(&t, &store_a, &master, 1_000).unwrap();
    assert_eq!(v_a, 2);
    assert!(matches!(
        push_store(&t, &store_b, 0),
        Err(SyncError::VersionConflict { .. })
    ));
    let (merged, v_b) = sync_push_with_merge(&t, &store_b, &master, 2_000).unwrap();
    assert_eq!(v_b, 3);

    let opened = UnlockedStore::open(master.clone(), &merged).unwrap();
    let mut rps: Vec<_> = opened.credentials().map(|c| c.rp_id().to_string()).collect();
    rps.sort();
    assert_eq!(rps, vec!["a.example", "b.example"]);

    // Server bytes equal the merged store bytes (bit-exact storage).
    let (server_bytes, _) = t.pull().unwrap();
    assert_eq!(server_bytes, cred_store::store_to_bytes(&merged));
}

#[test]
fn counter_conflicts_keep_the_higher_copy() {
    let master = vfa_core::key_hierarchy::MasterKey::from_bytes(
        [6u8; 32],
        vfa_core::key_hierarchy::KeyOrigin::Unwrapped,
    );
    let mut base = EncryptedStore::new(StoreMode::Baseline, MasterRef::Derived);
    let mut unlocked = UnlockedStore::open(master.clone(), &base).unwrap();
    ctap::make_credential(&mut unlocked, &mk_params("example.com", "u"), 1).unwrap();
    base = unlocked.into_encrypted();

    // Device A asserts 5 times, device B 7 times.
    let mut a = UnlockedStore::open(master.clone(), &base).unwrap();
    let mut b = UnlockedStore::open(master.clone(), &base).unwrap();
    let ga = GetAssertionParams {
        client_data_hash: [0; 32],
        rp_id: RpId::new("example.com").unwrap(),
        allow_list: None,
    };
    for _ in 0..5 {
        ctap::get_assertion(&mut a, &ga).unwrap();
    }
    for _ in 0..7 {
        ctap::get_assertion(&mut b, &ga).unwrap();
    }

    let merged = merge_stores(&master, a.encrypted(), b.encrypted(), 1_000).unwrap();
    let opened = UnlockedStore::open(master, &merged).unwrap();
    assert_eq!(opened.credentials().next().unwrap().sign_counter(), 7);
}

#[test]
fn deletion_beats_a_concurrent_assertion() {
    let master = vfa_core::key_hierarchy::MasterKey::from_bytes(
        [7u8; 32],
        vfa_core::key_hierarchy::KeyOrigin::Unwrapped,
    );
    let mut base = EncryptedStore::new(StoreMode::Baseline, MasterRef::Derived);
    let mut unlocked = UnlockedStore::open(master.clone(), &base).unwrap();
    ctap::make_credential(&mut unlocked, &mk_params("example.com", "u"), 1).unwrap();
    base = unlocked.into_encrypted();
    let id = UnlockedStore::open(master.clone(), &base)
        .unwrap()
        .credentials()
        .next()
        .unwrap()
        .credential_id();

    // Device B asserts at t=500 (counter moves), device A deletes at t=900.
    let mut b = UnlockedStore::open(master.clone(), &base).unwrap();
    ctap::get_assertion(
        &mut b,
        &GetAssertionParams {
            client_data_hash: [0; 32],
            rp_id: RpId::new("example.com").unwrap(),
            allow_list: None,
        },
    )
    .unwrap();
    let mut a = base.clone();
    cred_store::delete_credential(&master, &mut a, id, 900).unwrap();

    for (left, right) in [(&a, b.encrypted()), (b.encrypted(), &a)] {
        let merged = merge_stores(&master, left, right, 1_000).unwrap();
        let opened = UnlockedStore::open(master.clone(), &merged).unwrap();
        assert_eq!(opened.credentials().count(), 0, "tombstone must win");
        assert_eq!(opened.tombstones().count(), 1);
    }
}
