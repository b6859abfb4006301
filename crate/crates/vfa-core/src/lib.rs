//! Virtual FIDO2 authenticator core.
//!
//! This crate implements a software authenticator whose credential store is
//! anchored to a PKCS#11-style e-signature token:
//!
//! * [`soft_token`] — a software emulation of a PIN-gated signing/wrapping
//!   token with non-exportable keys;
//! * [`key_hierarchy`] — derivation, enrollment and rotation of the 256-bit
//!   master key that seals every credential record;
//! * [`cred_store`] — the AEAD-sealed credential store, its on-disk `VFAS`
//!   envelope, and the unlock procedure;
//! * [`ctap`] — `MakeCredential` / `GetAssertion` with WebAuthn-conformant
//!   authenticator data, packed self-attestation and assertion structures;
//! * [`oprf`] — a 2HashDH-style oblivious PRF over ristretto255 used to bind
//!   the hardened master-key derivation to a local user-verification factor;
//! * [`sync`] — ciphertext-only blob synchronization with optimistic
//!   versioning, onboarding, and record-level merge.
//!
//! The cloud side of [`sync`] and [`oprf`] only ever sees ciphertext and
//! blinded group elements; nothing held by those services suffices to decrypt
//! a credential record.

pub mod clock;
pub mod cose;
pub mod cred_store;
pub mod ctap;
pub mod key_hierarchy;
pub mod oprf;
pub mod ratelimit;
pub mod soft_token;
pub mod stretch;
pub mod sync;

pub use clock::{ManualClock, SystemClock, TimeSource};
pub use stretch::StretchParams;
