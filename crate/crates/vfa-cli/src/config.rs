//! CLI configuration: defaults, optional TOML file, flag overrides.

use std::path::PathBuf;

use base64::engine::general_purpose::URL_SAFE_NO_PAD as B64;
use base64::Engine;
use serde::Deserialize;
use vfa_core::StretchParams;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Baseline,
    Hardened,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum KdfProfile {
    /// Argon2id, 19 MiB, t=2 — the default for real use.
    Interactive,
    /// Argon2id, 256 KiB, t=1 — for tests and demos.
    Fast,
}

impl KdfProfile {
    pub fn params(self) -> StretchParams {
        match self {
            KdfProfile::Interactive => StretchParams::INTERACTIVE,
            KdfProfile::Fast => StretchParams::FAST,
        }
    }
}

/// Fully resolved configuration a command runs with.
#[derive(Debug, Clone)]
pub struct CliConfig {
    pub token_path: PathBuf,
    pub store_path: PathBuf,
    pub sync_url: String,
    pub oprf_url: String,
    pub rp_url: String,
    pub mode: Mode,
    pub user_id: String,
    pub bearer_secret: Option<[u8; 32]>,
    pub kdf: StretchParams,
    /// OPRF server key file, used by the in-process attack demo.
    pub oprf_key_path: Option<PathBuf>,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            token_path: PathBuf::from("token.vfat"),
            store_path: PathBuf::from("store.vfas"),
            sync_url: "http://127.0.0.1:9401".into(),
            oprf_url: "http://127.0.0.1:9402".into(),
            rp_url: "http://127.0.0.1:9403".into(),
            mode: Mode::Baseline,
            user_id: "default".into(),
            bearer_secret: None,
            kdf: StretchParams::INTERACTIVE,
            oprf_key_path: None,
        }
    }
}

/// What the TOML config file may contain (`key = "value"` per line).
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    token: Option<PathBuf>,
    store: Option<PathBuf>,
    sync_url: Option<String>,
    oprf_url: Option<String>,
    rp_url: Option<String>,
    mode: Option<String>,
    user_id: Option<String>,
    bearer: Option<String>,
    kdf_profile: Option<String>,
    oprf_key: Option<PathBuf>,
}

pub fn decode_bearer(s: &str) -> Result<[u8; 32], CliError> {
    B64.decode(s.as_bytes())
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| CliError::Usage("bearer must be base64url of 32 bytes".into()))
}

impl CliConfig {
    /// Layer a config file over the defaults. Flag overrides are applied by
    /// the binary afterwards.
    pub fn load(path: Option<&std::path::Path>) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let Some(path) = path else { return Ok(cfg) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let file: FileConfig = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("bad config file: {e}")))?;
        if let Some(v) = file.token {
            cfg.token_path = v;
        }
        if let Some(v) = file.store {
            cfg.store_path = v;
        }
        if let Some(v) = file.sync_url {
            cfg.sync_url = v;
        }
        if let Some(v) = file.oprf_url {
            cfg.oprf_url = v;
        }
        if let Some(v) = file.rp_url {
            cfg.rp_url = v;
        }
        if let Some(v) = file.mode {
            cfg.mode = match v.as_str() {
                "baseline" => Mode::Baseline,
                "hardened" => Mode::Hardened,
                other => return Err(CliError::Usage(format!("unknown mode {other:?}"))),
            };
        }
        if let Some(v) = file.user_id {
            cfg.user_id = v;
        }
        if let Some(v) = file.bearer {
            cfg.bearer_secret = Some(decode_bearer(&v)?);
        }
        if let Some(v) = file.kdf_profile {
            cfg.kdf = match v.as_str() {
                "interactive" => StretchParams::INTERACTIVE,
                "fast" => StretchParams::FAST,
                other => return Err(CliError::Usage(format!("unknown kdf profile {other:?}"))),
            };
        }
        if let Some(v) = file.oprf_key {
            cfg.oprf_key_path = Some(v);
        }
        Ok(cfg)
    }
}
