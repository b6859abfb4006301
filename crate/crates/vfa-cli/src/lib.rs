//! Command implementations behind the `vfa` binary, exposed as a library so
//! integration tests can drive them in-process.

pub mod attack;
pub mod bench;
pub mod client;
pub mod commands;
pub mod config;
pub mod serve;
pub mod stdio;

use vfa_core::cred_store::{StoreError, UnlockError};
use vfa_core::ctap::CtapError;
use vfa_core::oprf::OprfError;
use vfa_core::soft_token::TokenError;
use vfa_core::sync::{OnboardError, SyncError};

/// Every documented failure gets its own exit code; success is 0.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("a store already exists at the configured path")]
    StoreExists,
    #[error("OPRF server unavailable or not configured")]
    OprfUnavailable,
    #[error("wrong PIN ({retries_remaining} retries remaining)")]
    WrongPin { retries_remaining: u8 },
    #[error("token is locked")]
    TokenLocked,
    #[error("wrong PUK")]
    WrongPuk,
    #[error("decryption failed (wrong token/key or tampering)")]
    DecryptFailed,
    #[error("no matching credential")]
    NoCredentials,
    #[error("credential excluded by the relying party")]
    CredentialExcluded,
    #[error("relying party requires a QES registration token")]
    MissingRegistrationToken,
    #[error("not found")]
    NotFound,
    #[error("sync version conflict (server at {current})")]
    VersionConflict { current: u64 },
    #[error("unauthorized")]
    Unauthorized,
    #[error("corrupt file or payload: {0}")]
    Corrupt(String),
    #[error("signature or attestation rejected by verifier")]
    VerifierRejected,
    #[error("challenge mismatched or expired")]
    ChallengeProblem,
    #[error("assertion counter regression reported")]
    CounterRegression,
    #[error("rate limited by the OPRF server")]
    RateLimited,
    #[error("session not authenticated")]
    SessionNotAuthenticated,
    #[error("invalid PIN or PUK format")]
    InvalidPinFormat,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::StoreExists => 10,
            CliError::OprfUnavailable => 11,
            CliError::WrongPin { .. } => 12,
            CliError::TokenLocked => 13,
            CliError::WrongPuk => 14,
            CliError::DecryptFailed => 15,
            CliError::NoCredentials => 16,
            CliError::CredentialExcluded => 17,
            CliError::MissingRegistrationToken => 18,
            CliError::NotFound => 19,
            CliError::VersionConflict { .. } => 20,
            CliError::Unauthorized => 21,
            CliError::Corrupt(_) => 22,
            CliError::VerifierRejected => 23,
            CliError::ChallengeProblem => 24,
            CliError::CounterRegression => 25,
            CliError::RateLimited => 26,
            CliError::SessionNotAuthenticated => 27,
            CliError::InvalidPinFormat => 28,
            CliError::Transport(_) => 29,
            CliError::Io(_) => 30,
            CliError::Other(_) => 1,
        }
    }

    /// Map a relying-party wire error code to the matching CLI error.
    pub fn from_rp_code(code: &str) -> Self {
        match code {
            "missing_registration_token" => CliError::MissingRegistrationToken,
            "challenge_mismatch" | "expired" => CliError::ChallengeProblem,
            "bad_attestation" | "bad_signature" | "unknown_token" => CliError::VerifierRejected,
            "counter_regression" => CliError::CounterRegression,
            "unknown_credential" => CliError::NoCredentials,
            other => CliError::Other(format!("relying party error: {other}")),
        }
    }
}

impl From<TokenError> for CliError {
    fn from(e: TokenError) -> Self {
        match e {
            TokenError::InvalidPinFormat => CliError::InvalidPinFormat,
            TokenError::WrongPin { retries_remaining } => CliError::WrongPin { retries_remaining },
            TokenError::TokenLocked => CliError::TokenLocked,
            TokenError::NotLocked => CliError::Usage("token is not locked".into()),
            TokenError::WrongPuk => CliError::WrongPuk,
            TokenError::SessionNotAuthenticated => CliError::SessionNotAuthenticated,
            TokenError::UnwrapFailed => CliError::DecryptFailed,
            TokenError::InvalidKdfParams => CliError::Usage("unsupported KDF parameters".into()),
            TokenError::CorruptToken(msg) => CliError::Corrupt(msg),
            TokenError::SignFailed => CliError::Other("token signing failed".into()),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::DecryptFailed => CliError::DecryptFailed,
            StoreError::NotFound => CliError::NotFound,
            StoreError::CorruptStore(msg) => CliError::Corrupt(msg),
            StoreError::CorruptRecord(msg) => CliError::Corrupt(msg.into()),
            StoreError::InvalidRecord(msg) => CliError::Usage(msg.into()),
        }
    }
}

impl From<UnlockError> for CliError {
    fn from(e: UnlockError) -> Self {
        match e {
            UnlockError::DecryptFailed => CliError::DecryptFailed,
            UnlockError::Token(t) => t.into(),
            UnlockError::OprfUnavailable => CliError::OprfUnavailable,
            UnlockError::Oprf(o) => o.into(),
            UnlockError::CorruptStore(msg) => CliError::Corrupt(msg),
        }
    }
}

impl From<OprfError> for CliError {
    fn from(e: OprfError) -> Self {
        match e {
            OprfError::RateLimited => CliError::RateLimited,
            OprfError::Unavailable(msg) => CliError::Transport(msg),
            OprfError::WrongKeyId { .. } => CliError::Other(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<SyncError> for CliError {
    fn from(e: SyncError) -> Self {
        match e {
            SyncError::VersionConflict { current } => CliError::VersionConflict { current },
            SyncError::Unauthorized => CliError::Unauthorized,
            SyncError::NotFound => CliError::NotFound,
            SyncError::Transport(msg) => CliError::Transport(msg),
            SyncError::Corrupt(s) => s.into(),
        }
    }
}

impl From<OnboardError> for CliError {
    fn from(e: OnboardError) -> Self {
        match e {
            OnboardError::Sync(s) => s.into(),
            OnboardError::Unlock(u) => u.into(),
        }
    }
}

impl From<CtapError> for CliError {
    fn from(e: CtapError) -> Self {
        match e {
            CtapError::CredentialExcluded => CliError::CredentialExcluded,
            CtapError::NoCredentials => CliError::NoCredentials,
            CtapError::Store(s) => s.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Result of a command: a human-readable report and a JSON value for
/// `--json` mode.
#[derive(Debug)]
pub struct Outcome {
    pub human: String,
    pub json: serde_json::Value,
}

impl Outcome {
    pub fn new(human: impl Into<String>, json: serde_json::Value) -> Self {
        Self { human: human.into(), json }
    }
}
