//! OPRF protocol properties: oracle equivalence, element validation,
//! obliviousness surrogate, rate limiting as an online-guessing bound.

use std::collections::HashSet;
use std::sync::Arc;

use curve25519_dalek::ristretto::CompressedRistretto;
use rand::rngs::OsRng;
use rand::Rng;
use vfa_core::clock::ManualClock;
use vfa_core::oprf::{
    derive_verification_input, oprf_blind, oprf_direct, oprf_finalize, InProcessOprf,
    OprfError, OprfEvaluator, OprfServer, OprfServerKey,
};
use vfa_core::ratelimit::RateLimitConfig;
use vfa_core::StretchParams;

fn server_with(limit: u32, clock: Arc<ManualClock>) -> OprfServer {
    OprfServer::new(
        OprfServerKey::generate(&mut OsRng),
        RateLimitConfig { max_per_window: limit, window_ms: 60_000 },
        clock,
    )
}

fn random_pin() -> String {
    format!("{:06}", OsRng.gen_range(0..1_000_000u32))
}

#[test]
fn protocol_equals_direct_oracle_for_100_random_inputs() {
    let key = OprfServerKey::generate(&mut OsRng);
    let oracle_key = OprfServerKey::from_scalar_bytes(&key.scalar_bytes()).unwrap();
    let clock = Arc::new(ManualClock::new(0));
    let server = OprfServer::new(
        key,
        RateLimitConfig { max_per_window: 1_000, window_ms: 60_000 },
        clock,
    );
    let store_id = [3u8; 16];

    for i in 0..100 {
        let pin = random_pin();
        let label = format!("label-{}", i % 7);
        let x = derive_verification_input(&pin, &store_id, &StretchParams::FAST).unwrap();
        let expected = oprf_direct(&oracle_key, &x, label.as_bytes());

        let (blinded, mut state) = oprf_blind(&x, label.as_bytes(), &mut OsRng);
        // Wire form is a valid canonical group element.
        assert!(CompressedRistretto(blinded.0).decompress().is_some());
        let evaluated = server.evaluate("tester", server.key_id(), &blinded).unwrap();
        let y = oprf_finalize(&mut state, &evaluated).unwrap();
        assert_eq!(y, expected, "protocol and oracle disagree on input {i}");
    }
}

#[test]
fn distinct_inputs_yield_distinct_outputs() {
    let key = OprfServerKey::generate(&mut OsRng);
    let store_id = [9u8; 16];
    let mut seen = HashSet::new();
    for i in 0..1_000u32 {
        let pin = format!("pin-{i}");
        let x = derive_verification_input(&pin, &store_id, &StretchParams::FAST).unwrap();
        let y = oprf_direct(&key, &x, b"label");
        assert!(seen.insert(*y.as_bytes()), "collision at input {i}");
    }
}

#[test]
fn direct_oracle_is_deterministic() {
    let key = OprfServerKey::generate(&mut OsRng);
    let x = derive_verification_input("1234", &[1u8; 16], &StretchParams::FAST).unwrap();
    assert_eq!(oprf_direct(&key, &x, b"l"), oprf_direct(&key, &x, b"l"));
}

#[test]
fn transcripts_do_not_repeat_for_equal_inputs() {
    // Obliviousness surrogate: the only x-dependent value on the wire is the
    // blinded element, and fresh blinds make it unlinkable across runs.
    let x = derive_verification_input("1234", &[1u8; 16], &StretchParams::FAST).unwrap();
    let mut wires = HashSet::new();
    for _ in 0..32 {
        let (blinded, _state) = oprf_blind(&x, b"label", &mut OsRng);
        assert!(wires.insert(blinded.0), "blinded element repeated");
    }
}

#[test]
fn eleventh_request_in_a_minute_is_rate_limited() {
    let clock = Arc::new(ManualClock::new(0));
    let server = server_with(10, clock.clone());
    let x = derive_verification_input("1234", &[2u8; 16], &StretchParams::FAST).unwrap();

    for _ in 0..10 {
        let (blinded, _) = oprf_blind(&x, b"label", &mut OsRng);
        server.evaluate("alice", server.key_id(), &blinded).unwrap();
    }
    let (blinded, _) = oprf_blind(&x, b"label", &mut OsRng);
    assert!(matches!(
        server.evaluate("alice", server.key_id(), &blinded),
        Err(OprfError::RateLimited)
    ));
    // Another caller is unaffected; the same caller recovers next window.
    server.evaluate("bob", server.key_id(), &blinded).unwrap();
    clock.advance_ms(60_000);
    server.evaluate("alice", server.key_id(), &blinded).unwrap();
}

#[test]
fn online_guessing_is_bounded_by_the_limiter() {
    let clock = Arc::new(ManualClock::new(0));
    let server = Arc::new(server_with(10, clock));
    let client = InProcessOprf { server: server.clone(), caller: "adversary".into() };
    let store_id = [4u8; 16];

    let mut evaluated = 0u32;
    let mut limited = 0u32;
    for i in 0..1_000u32 {
        let x =
            derive_verification_input(&format!("{i:04}"), &store_id, &StretchParams::FAST)
                .unwrap();
        let (blinded, mut state) = oprf_blind(&x, b"label", &mut OsRng);
        match client.evaluate(server.key_id(), &blinded) {
            Ok(e) => {
                oprf_finalize(&mut state, &e).unwrap();
                evaluated += 1;
            }
            Err(OprfError::RateLimited) => limited += 1,
            Err(other) => panic!("unexpected error: {other}"),
        }
    }
    assert_eq!(evaluated, 10, "guesses past the limit were evaluated");
    assert_eq!(limited, 990);
    assert_eq!(server.access_log().len(), 10);
}

#[test]
fn wrong_server_key_changes_output_without_error() {
    let key_a = OprfServerKey::generate(&mut OsRng);
    let key_b = OprfServerKey::generate(&mut OsRng);
    let x = derive_verification_input("1234", &[5u8; 16], &StretchParams::FAST).unwrap();
    let expected_a = oprf_direct(&key_a, &x, b"label");

    // Server B answers (evaluation is unverified): finalize succeeds but the
    // output cannot match A's PRF.
    let clock = Arc::new(ManualClock::new(0));
    let server_b = OprfServer::new(key_b, RateLimitConfig::default(), clock);
    let (blinded, mut state) = oprf_blind(&x, b"label", &mut OsRng);
    let evaluated = server_b.evaluate("c", server_b.key_id(), &blinded).unwrap();
    let y = oprf_finalize(&mut state, &evaluated).unwrap();
    assert_ne!(y, expected_a);
}
