//! Shared helpers for integration tests. Token creation involves RSA keygen,
//! so instances are cached per seed byte and cloned out.
#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use vfa_core::soft_token::TokenHandle;
use vfa_core::StretchParams;

pub const PIN: &str = "1234";
pub const PUK: &str = "87654321";

pub fn seed(byte: u8) -> [u8; 32] {
    [byte; 32]
}

/// A fresh handle for the token with the given seed byte (FAST stretching).
pub fn token(byte: u8) -> TokenHandle {
    static CACHE: OnceLock<Mutex<HashMap<u8, TokenHandle>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut cache = cache.lock().unwrap();
    cache
        .entry(byte)
        .or_insert_with(|| {
            TokenHandle::create_with_params(PIN, PUK, &seed(byte), StretchParams::FAST)
                .expect("token creation")
        })
        .clone()
}
