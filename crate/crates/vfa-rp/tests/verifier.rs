//! Verifier behavior against hand-rolled WebAuthn structures. The builders
//! here are written from the wire layout directly and share no code with any
//! authenticator implementation.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use base64::engine::general_purpose::URL_SAFE_NO_PAD as B64;
use base64::Engine;
use ciborium::value::Value;
use p256::ecdsa::signature::Signer;
use p256::ecdsa::{DerSignature, SigningKey};
use rand::rngs::OsRng;
use sha2::{Digest, Sha256};
use vfa_rp::{
    AssertionInput, RegistrationChallenge, RelyingParty, RpError, RpPolicy, TimeSource,
};

struct ManualClock(AtomicU64);

impl TimeSource for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

fn cose_key(key: &SigningKey) -> Vec<u8> {
    let point = key.verifying_key().to_encoded_point(false);
    let map = Value::Map(vec![
        (Value::Integer(1.into()), Value::Integer(2.into())),
        (Value::Integer(3.into()), Value::Integer((-7).into())),
        (Value::Integer((-1).into()), Value::Integer(1.into())),
        (Value::Integer((-2).into()), Value::Bytes(point.x().unwrap().to_vec())),
        (Value::Integer((-3).into()), Value::Bytes(point.y().unwrap().to_vec())),
    ]);
    let mut out = Vec::new();
    ciborium::into_writer(&map, &mut out).unwrap();
    out
}

fn auth_data_registration(rp_id: &str, counter: u32, cred_id: &[u8], cose: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&Sha256::digest(rp_id.as_bytes()));
    out.push(0x45); // UP | UV | AT
    out.extend_from_slice(&counter.to_be_bytes());
    out.extend_from_slice(&[0u8; 16]); // aaguid
    out.extend_from_slice(&(cred_id.len() as u16).to_be_bytes());
    out.extend_from_slice(cred_id);
    out.extend_from_slice(cose);
    out
}

fn auth_data_assertion(rp_id: &str, counter: u32) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&Sha256::digest(rp_id.as_bytes()));
    out.push(0x05); // UP | UV
    out.extend_from_slice(&counter.to_be_bytes());
    out
}

fn client_data(type_: &str, challenge: &[u8; 32], rp_id: &str) -> Vec<u8> {
    format!(
        r#"{{"type":"{}","challenge":"{}","origin":"https://{}"}}"#,
        type_,
        B64.encode(challenge),
        rp_id
    )
    .into_bytes()
}

fn attestation_object(auth_data: &[u8], signature: &[u8]) -> Vec<u8> {
    let att_stmt = Value::Map(vec![
        (Value::Text("alg".into()), Value::Integer((-7).into())),
        (Value::Text("sig".into()), Value::Bytes(signature.to_vec())),
    ]);
    let map = Value::Map(vec![
        (Value::Text("fmt".into()), Value::Text("packed".into())),
        (Value::Text("attStmt".into()), att_stmt),
        (Value::Text("authData".into()), Value::Bytes(auth_data.to_vec())),
    ]);
    let mut out = Vec::new();
    ciborium::into_writer(&map, &mut out).unwrap();
    out
}

struct TestCredential {
    key: SigningKey,
    credential_id: Vec<u8>,
    counter: u32,
    rp_id: String,
}

fn register(rp: &RelyingParty, rp_id: &str) -> TestCredential {
    let challenge = rp.begin_registration(rp_id);
    register_with_challenge(rp, rp_id, challenge)
}

fn register_with_challenge(
    rp: &RelyingParty,
    rp_id: &str,
    challenge: RegistrationChallenge,
) -> TestCredential {
    let key = SigningKey::random(&mut OsRng);
    let credential_id = rand::random::<[u8; 16]>().to_vec();
    let cose = cose_key(&key);
    let auth = auth_data_registration(rp_id, 0, &credential_id, &cose);
    let cd = client_data("webauthn.create", &challenge.challenge, rp_id);
    let mut message = auth.clone();
    message.extend_from_slice(&Sha256::digest(&cd));
    let sig: DerSignature = key.sign(&message);
    let att = attestation_object(&auth, sig.as_bytes());

    let stored = rp.verify_registration(&challenge, &att, &cd).expect("registration accepted");
    assert_eq!(stored.credential_id, credential_id);
    assert_eq!(stored.last_counter, 0);
    TestCredential { key, credential_id, counter: 0, rp_id: rp_id.to_string() }
}

fn assert_once(rp: &RelyingParty, cred: &mut TestCredential) -> Result<u32, RpError> {
    cred.counter += 1;
    let login = rp.begin_login();
    let auth = auth_data_assertion(&cred.rp_id, cred.counter);
    let cd = client_data("webauthn.get", &login.challenge, &cred.rp_id);
    let mut message = auth.clone();
    message.extend_from_slice(&Sha256::digest(&cd));
    let sig: DerSignature = cred.key.sign(&message);
    rp.verify_assertion(&AssertionInput {
        credential_id: cred.credential_id.clone(),
        auth_data: auth,
        signature: sig.as_bytes().to_vec(),
        user_handle: b"user".to_vec(),
        client_data: cd,
    })
    .map(|a| a.counter)
}

#[test]
fn registration_then_assertions_with_increasing_counters() {
    let rp = RelyingParty::new(RpPolicy::default());
    let mut cred = register(&rp, "example.com");
    for expected in 1..=3 {
        assert_eq!(assert_once(&rp, &mut cred).unwrap(), expected);
    }
}

#[test]
fn wrong_challenge_in_client_data_is_rejected() {
    let rp = RelyingParty::new(RpPolicy::default());
    let challenge = rp.begin_registration("example.com");

    let key = SigningKey::random(&mut OsRng);
    let cose = cose_key(&key);
    let auth = auth_data_registration("example.com", 0, b"idididididididid", &cose);
    let cd = client_data("webauthn.create", &[9u8; 32], "example.com"); // wrong
    let mut message = auth.clone();
    message.extend_from_slice(&Sha256::digest(&cd));
    let sig: DerSignature = key.sign(&message);
    let att = attestation_object(&auth, sig.as_bytes());

    assert_eq!(
        rp.verify_registration(&challenge, &att, &cd).map(|_| ()),
        Err(RpError::ChallengeMismatch)
    );
}

#[test]
fn cleared_uv_bit_is_rejected_under_uv_policy() {
    let rp = RelyingParty::new(RpPolicy::default());
    let challenge = rp.begin_registration("example.com");

    let key = SigningKey::random(&mut OsRng);
    let cose = cose_key(&key);
    let mut auth = auth_data_registration("example.com", 0, b"idididididididid", &cose);
    auth[32] &= !0x04; // clear UV
    let cd = client_data("webauthn.create", &challenge.challenge, "example.com");
    let mut message = auth.clone();
    message.extend_from_slice(&Sha256::digest(&cd));
    let sig: DerSignature = key.sign(&message);
    let att = attestation_object(&auth, sig.as_bytes());

    assert_eq!(
        rp.verify_registration(&challenge, &att, &cd).map(|_| ()),
        Err(RpError::BadAttestation("user verification"))
    );
}

#[test]
fn corrupted_signature_bit_is_rejected() {
    let rp = RelyingParty::new(RpPolicy::default());
    let mut cred = register(&rp, "example.com");

    cred.counter += 1;
    let login = rp.begin_login();
    let auth = auth_data_assertion("example.com", cred.counter);
    let cd = client_data("webauthn.get", &login.challenge, "example.com");
    let mut message = auth.clone();
    message.extend_from_slice(&Sha256::digest(&cd));
    let sig: DerSignature = cred.key.sign(&message);
    let mut sig_bytes = sig.as_bytes().to_vec();
    let flip = sig_bytes.len() / 2;
    sig_bytes[flip] ^= 0x01;

    assert_eq!(
        rp.verify_assertion(&AssertionInput {
            credential_id: cred.credential_id.clone(),
            auth_data: auth,
            signature: sig_bytes,
            user_handle: vec![],
            client_data: cd,
        })
        .map(|_| ()),
        Err(RpError::BadSignature)
    );
}

#[test]
fn replayed_counter_value_is_flagged_as_clone_suspicion() {
    let rp = RelyingParty::new(RpPolicy::default());
    let mut cred = register(&rp, "example.com");
    assert_once(&rp, &mut cred).unwrap();

    // Same counter again (fresh challenge, valid signature): regression.
    cred.counter -= 1;
    assert_eq!(assert_once(&rp, &mut cred).map(|_| ()), Err(RpError::CounterRegression));
}

#[test]
fn unknown_credential_is_rejected() {
    let rp = RelyingParty::new(RpPolicy::default());
    let login = rp.begin_login();
    let key = SigningKey::random(&mut OsRng);
    let auth = auth_data_assertion("example.com", 1);
    let cd = client_data("webauthn.get", &login.challenge, "example.com");
    let mut message = auth.clone();
    message.extend_from_slice(&Sha256::digest(&cd));
    let sig: DerSignature = key.sign(&message);
    assert_eq!(
        rp.verify_assertion(&AssertionInput {
            credential_id: b"nobody".to_vec(),
            auth_data: auth,
            signature: sig.as_bytes().to_vec(),
            user_handle: vec![],
            client_data: cd,
        })
        .map(|_| ()),
        Err(RpError::UnknownCredential)
    );
}

#[test]
fn concurrent_submissions_of_one_challenge_admit_exactly_one() {
    let rp = Arc::new(RelyingParty::new(RpPolicy::default()));
    let challenge = rp.begin_registration("example.com");

    let key = SigningKey::random(&mut OsRng);
    let credential_id = rand::random::<[u8; 16]>().to_vec();
    let cose = cose_key(&key);
    let auth = auth_data_registration("example.com", 0, &credential_id, &cose);
    let cd = client_data("webauthn.create", &challenge.challenge, "example.com");
    let mut message = auth.clone();
    message.extend_from_slice(&Sha256::digest(&cd));
    let sig: DerSignature = key.sign(&message);
    let att = attestation_object(&auth, sig.as_bytes());

    let successes: usize = std::thread::scope(|scope| {
        (0..8)
            .map(|_| {
                let rp = rp.clone();
                let challenge = challenge.clone();
                let att = att.clone();
                let cd = cd.clone();
                scope.spawn(move || rp.verify_registration(&challenge, &att, &cd).is_ok())
            })
            .collect::<Vec<_>>()
            .into_iter()
            .map(|h| h.join().unwrap() as usize)
            .sum()
    });
    assert_eq!(successes, 1);
}

// ---- QES gate --------------------------------------------------------------

fn rsa_token() -> (rsa::RsaPrivateKey, Vec<u8>) {
    use rsa::pkcs8::EncodePublicKey;
    let private = rsa::RsaPrivateKey::new(&mut OsRng, 2048).unwrap();
    let spki = rsa::RsaPublicKey::from(&private)
        .to_public_key_der()
        .unwrap()
        .as_bytes()
        .to_vec();
    (private, spki)
}

fn qes_policy() -> RpPolicy {
    RpPolicy { require_qes_gate: true, ..RpPolicy::default() }
}

#[test]
fn qes_gate_issues_token_and_registration_consumes_it() {
    let clock = Arc::new(ManualClock(AtomicU64::new(1_000_000)));
    let rp = RelyingParty::with_clock(qes_policy(), clock.clone());
    let (private, spki) = rsa_token();
    let fingerprint = rp.register_qes_key(&spki).unwrap();

    // Without the gate the ceremony is refused.
    let bare = rp.begin_registration("example.com");
    let key = SigningKey::random(&mut OsRng);
    let cose = cose_key(&key);
    let auth = auth_data_registration("example.com", 0, b"idididididididid", &cose);
    let cd = client_data("webauthn.create", &bare.challenge, "example.com");
    let mut message = auth.clone();
    message.extend_from_slice(&Sha256::digest(&cd));
    let sig: DerSignature = key.sign(&message);
    let att = attestation_object(&auth, sig.as_bytes());
    assert_eq!(
        rp.verify_registration(&bare, &att, &cd).map(|_| ()),
        Err(RpError::MissingRegistrationToken)
    );

    // Prove token possession, then register within the token lifetime.
    let qes_challenge = rp.qes_challenge();
    let digest: [u8; 32] = Sha256::digest(qes_challenge).into();
    let signature = private.sign(rsa::Pkcs1v15Sign::new::<Sha256>(), &digest).unwrap();
    let token = rp.qes_prove(fingerprint, qes_challenge, &signature).unwrap();

    let mut challenge = rp.begin_registration("example.com");
    challenge.registration_token = Some(token.token.to_vec());
    register_with_challenge(&rp, "example.com", challenge);
}

#[test]
fn qes_rejects_unknown_and_mismatched_tokens() {
    let rp = RelyingParty::new(qes_policy());
    let (private, spki) = rsa_token();
    let fingerprint = rp.register_qes_key(&spki).unwrap();

    // Unknown fingerprint.
    let challenge = rp.qes_challenge();
    let digest: [u8; 32] = Sha256::digest(challenge).into();
    let signature = private.sign(rsa::Pkcs1v15Sign::new::<Sha256>(), &digest).unwrap();
    assert_eq!(
        rp.qes_prove([0u8; 8], challenge, &signature).map(|_| ()),
        Err(RpError::UnknownToken)
    );

    // Known fingerprint, signature from a different token.
    let (other_private, _) = rsa_token();
    let challenge = rp.qes_challenge();
    let digest: [u8; 32] = Sha256::digest(challenge).into();
    let bad = other_private.sign(rsa::Pkcs1v15Sign::new::<Sha256>(), &digest).unwrap();
    assert_eq!(
        rp.qes_prove(fingerprint, challenge, &bad).map(|_| ()),
        Err(RpError::BadSignature)
    );
}

#[test]
fn registration_token_expires_after_its_lifetime() {
    let clock = Arc::new(ManualClock(AtomicU64::new(0)));
    let rp = RelyingParty::with_clock(qes_policy(), clock.clone());
    let (private, spki) = rsa_token();
    let fingerprint = rp.register_qes_key(&spki).unwrap();

    let qes_challenge = rp.qes_challenge();
    let digest: [u8; 32] = Sha256::digest(qes_challenge).into();
    let signature = private.sign(rsa::Pkcs1v15Sign::new::<Sha256>(), &digest).unwrap();
    let token = rp.qes_prove(fingerprint, qes_challenge, &signature).unwrap();

    // 121 seconds later the token is stale.
    clock.0.store(121_000, Ordering::SeqCst);
    let mut challenge = rp.begin_registration("example.com");
    challenge.registration_token = Some(token.token.to_vec());

    let key = SigningKey::random(&mut OsRng);
    let cose = cose_key(&key);
    let auth = auth_data_registration("example.com", 0, b"idididididididid", &cose);
    let cd = client_data("webauthn.create", &challenge.challenge, "example.com");
    let mut message = auth.clone();
    message.extend_from_slice(&Sha256::digest(&cd));
    let sig: DerSignature = key.sign(&message);
    let att = attestation_object(&auth, sig.as_bytes());
    assert_eq!(rp.verify_registration(&challenge, &att, &cd).map(|_| ()), Err(RpError::Expired));
}

#[test]
fn verifier_has_no_authenticator_dependencies() {
    // Server-side independence, checked against the manifest itself.
    let manifest = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/Cargo.toml"))
        .unwrap();
    let deps = manifest.split("[dependencies]").nth(1).unwrap_or("");
    for forbidden in ["vfa-core", "vfa-cli"] {
        assert!(
            !deps.contains(forbidden),
            "verifier must not depend on {forbidden}"
        );
    }
}

#[test]
fn base64_fields_roundtrip_through_the_wire_encoding() {
    // The HTTP layer uses unpadded url-safe base64 for every byte field.
    let bytes = rand::random::<[u8; 32]>();
    let encoded = B64.encode(bytes);
    assert!(!encoded.contains('='));
    assert_eq!(B64.decode(encoded.as_bytes()).unwrap(), bytes);
}
