//! Soft-token behavior: determinism, PIN lockout, PUK recovery, key
//! wrapping, at-rest round trips.

mod common;

use common::{seed, token, PIN, PUK};
use vfa_core::soft_token::{TokenError, TokenHandle};
use vfa_core::StretchParams;

fn digest(byte: u8) -> [u8; 32] {
    [byte; 32]
}

#[test]
fn same_seed_recreates_identical_token() {
    let mut a = TokenHandle::create_with_params(PIN, PUK, &seed(1), StretchParams::FAST).unwrap();
    let mut b = TokenHandle::create_with_params(PIN, PUK, &seed(1), StretchParams::FAST).unwrap();
    assert_eq!(a.token_id(), b.token_id());

    let sa = a.open_session(PIN).unwrap();
    let sb = b.open_session(PIN).unwrap();
    let sig_a = a.sign_deterministic(&sa, &digest(5)).unwrap();
    let sig_b = b.sign_deterministic(&sb, &digest(5)).unwrap();
    assert_eq!(sig_a.sigma, sig_b.sigma);
}

#[test]
fn distinct_seeds_sign_differently() {
    let mut a = token(1);
    let mut b = token(2);
    assert_ne!(a.token_id(), b.token_id());
    let sa = a.open_session(PIN).unwrap();
    let sb = b.open_session(PIN).unwrap();
    assert_ne!(
        a.sign_deterministic(&sa, &digest(5)).unwrap().sigma,
        b.sign_deterministic(&sb, &digest(5)).unwrap().sigma
    );
}

#[test]
fn pin_format_is_validated() {
    assert!(matches!(
        TokenHandle::create_with_params("12", PUK, &seed(3), StretchParams::FAST),
        Err(TokenError::InvalidPinFormat)
    ));
    assert!(matches!(
        TokenHandle::create_with_params(PIN, "short", &seed(3), StretchParams::FAST),
        Err(TokenError::InvalidPinFormat)
    ));
    // pin == puk is refused even when both lengths are legal.
    assert!(matches!(
        TokenHandle::create_with_params("88888888", "88888888", &seed(3), StretchParams::FAST),
        Err(TokenError::InvalidPinFormat)
    ));
}

#[test]
fn three_wrong_pins_lock_the_token() {
    let mut t = token(1);
    for expected_left in [2u8, 1, 0] {
        match t.open_session("0000") {
            Err(TokenError::WrongPin { retries_remaining }) => {
                assert_eq!(retries_remaining, expected_left)
            }
            other => panic!("expected WrongPin, got {other:?}"),
        }
    }
    assert!(t.pin_state().locked());
    // Even the correct PIN is refused once locked.
    assert!(matches!(t.open_session(PIN), Err(TokenError::TokenLocked)));
}

#[test]
fn wrong_wrong_correct_resets_retries() {
    let mut t = token(1);
    assert!(t.open_session("0000").is_err());
    assert!(t.open_session("0000").is_err());
    assert_eq!(t.pin_state().retries_remaining(), 1);
    let session = t.open_session(PIN).unwrap();
    assert!(session.authenticated());
    assert_eq!(t.pin_state().retries_remaining(), 3);
}

#[test]
fn retries_never_increase_between_successes() {
    let mut t = token(1);
    let mut last = t.pin_state().retries_remaining();
    for _ in 0..2 {
        let _ = t.open_session("9999");
        let now = t.pin_state().retries_remaining();
        assert!(now <= last, "retry counter went up without a success");
        last = now;
    }
}

#[test]
fn puk_recovery_resets_pin_and_unlocks() {
    let mut t = token(4);
    // Not locked yet: PUK path refused.
    assert!(matches!(
        t.unlock_with_puk(PUK, "5678"),
        Err(TokenError::NotLocked)
    ));
    for _ in 0..3 {
        let _ = t.open_session("0000");
    }
    assert!(t.pin_state().locked());
    assert!(matches!(
        t.unlock_with_puk("00000000", "5678"),
        Err(TokenError::WrongPuk)
    ));
    assert!(t.pin_state().locked());

    t.unlock_with_puk(PUK, "5678").unwrap();
    assert!(!t.pin_state().locked());
    assert_eq!(t.pin_state().retries_remaining(), 3);
    assert!(t.open_session(PIN).is_err()); // old PIN gone
    t.open_session("5678").unwrap();
}

#[test]
fn signing_is_deterministic_across_sessions_and_messages_differ() {
    let mut t = token(1);
    let s1 = t.open_session(PIN).unwrap();
    let first = t.sign_deterministic(&s1, &digest(9)).unwrap();
    let s2 = t.open_session(PIN).unwrap();
    let second = t.sign_deterministic(&s2, &digest(9)).unwrap();
    assert_eq!(first.sigma, second.sigma);

    let other = t.sign_deterministic(&s2, &digest(10)).unwrap();
    assert_ne!(first.sigma, other.sigma);
}

#[test]
fn wrap_roundtrip_cross_token_and_tamper() {
    let mut a = token(1);
    let mut b = token(2);
    let sa = a.open_session(PIN).unwrap();
    let sb = b.open_session(PIN).unwrap();

    let key = [0x5Au8; 32];
    let blob = a.wrap_key(&sa, &key).unwrap();
    assert_eq!(*a.unwrap_key(&sa, &blob).unwrap(), key);

    // A token from a different seed cannot unwrap.
    assert!(matches!(
        b.unwrap_key(&sb, &blob),
        Err(TokenError::UnwrapFailed)
    ));

    // Any flipped bit breaks authentication.
    let mut tampered = blob.clone();
    tampered.0[20] ^= 0x01;
    assert!(matches!(
        a.unwrap_key(&sa, &tampered),
        Err(TokenError::UnwrapFailed)
    ));

    // Same seed on another "device" unwraps fine.
    let mut a2 = TokenHandle::create_with_params(PIN, PUK, &seed(1), StretchParams::FAST).unwrap();
    let sa2 = a2.open_session(PIN).unwrap();
    assert_eq!(*a2.unwrap_key(&sa2, &blob).unwrap(), key);
}

#[test]
fn unauthenticated_foreign_session_is_refused_everywhere() {
    let mut a = token(1);
    let mut b = token(2);
    let foreign = b.open_session(PIN).unwrap();
    assert!(matches!(
        a.sign_deterministic(&foreign, &digest(0)),
        Err(TokenError::SessionNotAuthenticated)
    ));
    assert!(matches!(
        a.wrap_key(&foreign, &[0u8; 32]),
        Err(TokenError::SessionNotAuthenticated)
    ));
    let sa = a.open_session(PIN).unwrap();
    let blob = a.wrap_key(&sa, &[0u8; 32]).unwrap();
    assert!(matches!(
        a.unwrap_key(&foreign, &blob),
        Err(TokenError::SessionNotAuthenticated)
    ));
}

#[test]
fn at_rest_roundtrip_preserves_identity_and_signatures() {
    let mut t = token(6);
    let session = t.open_session(PIN).unwrap();
    let reference = t.sign_deterministic(&session, &digest(1)).unwrap();

    let bytes = t.to_bytes();
    let mut reloaded = TokenHandle::from_bytes(&bytes).unwrap();
    assert_eq!(reloaded.token_id(), t.token_id());

    let session = reloaded.open_session(PIN).unwrap();
    let resigned = reloaded.sign_deterministic(&session, &digest(1)).unwrap();
    assert_eq!(reference.sigma, resigned.sigma);
}

#[test]
fn corrupt_token_files_are_rejected() {
    let t = token(6);
    let bytes = t.to_bytes();

    assert!(matches!(
        TokenHandle::from_bytes(&bytes[..3]),
        Err(TokenError::CorruptToken(_))
    ));

    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    assert!(TokenHandle::from_bytes(&wrong_magic).is_err());

    let mut wrong_version = bytes.clone();
    wrong_version[4] = 0x7F;
    match TokenHandle::from_bytes(&wrong_version) {
        Err(TokenError::CorruptToken(msg)) => assert!(msg.contains("0x7f")),
        Err(other) => panic!("expected CorruptToken naming the version, got {other:?}"),
        Ok(_) => panic!("unknown version byte was accepted"),
    }
}

#[test]
fn locked_state_survives_serialization() {
    let mut t = token(8);
    for _ in 0..3 {
        let _ = t.open_session("0000");
    }
    let mut reloaded = TokenHandle::from_bytes(&t.to_bytes()).unwrap();
    assert!(reloaded.pin_state().locked());
    assert!(matches!(
        reloaded.open_session(PIN),
        Err(TokenError::TokenLocked)
    ));
    // PUK recovery works on the reloaded, sealed handle.
    reloaded.unlock_with_puk(PUK, "4321").unwrap();
    let s = reloaded.open_session("4321").unwrap();
    reloaded.sign_deterministic(&s, &digest(0)).unwrap();
}
