//! Command implementations: enrollment, unlock, WebAuthn ceremonies against
//! the relying party, sync, onboarding, and master-key rotation.

use rand::rngs::OsRng;
use rand::RngCore;
use serde_json::json;
use sha2::{Digest, Sha256};

use vfa_core::clock::{SystemClock, TimeSource};
use vfa_core::cred_store::{
    self, load_store, save_store, EncryptedStore, HardenedParams, HardenedUnlock, MasterRef,
    RpId, StoreMode, UnlockedStore,
};
use vfa_core::ctap::{self, GetAssertionParams, MakeCredentialParams};
use vfa_core::key_hierarchy::{
    derive_master_baseline, derive_master_hardened, enroll_master_wrapped, labels, rotate_master,
    MasterKey,
};
use vfa_core::oprf::{self, OprfError, OprfEvaluator};
use vfa_core::soft_token::{TokenHandle, TokenSession};
use vfa_core::sync::{self, SyncTransport};

use crate::client::{client_data_json, HttpOprf, HttpSync, RpClient};
use crate::config::{CliConfig, Mode};
use crate::{CliError, Outcome};

fn now_ms() -> u64 {
    SystemClock.now_ms()
}

/// Load the token file, verify the PIN, and persist the retry-counter
/// change the attempt caused (wrong attempts burn retries even across
/// process restarts, like a real token).
pub fn open_token(cfg: &CliConfig, pin: &str) -> Result<(TokenHandle, TokenSession), CliError> {
    let mut token = TokenHandle::load(&cfg.token_path)?;
    let result = token.open_session(pin);
    token
        .save(&cfg.token_path)
        .map_err(|e| CliError::Io(e.to_string()))?;
    Ok((token, result?))
}

/// Transport bundle for the store's mode.
pub struct UnlockSupport {
    evaluator: Option<Box<dyn OprfEvaluator>>,
}

impl UnlockSupport {
    pub fn for_store(cfg: &CliConfig, store: &EncryptedStore) -> Self {
        let evaluator: Option<Box<dyn OprfEvaluator>> = match store.mode() {
            StoreMode::Hardened => Some(Box::new(HttpOprf::new(&cfg.oprf_url, &cfg.user_id))),
            StoreMode::Baseline => None,
        };
        Self { evaluator }
    }

    pub fn in_process(evaluator: Box<dyn OprfEvaluator>) -> Self {
        Self { evaluator: Some(evaluator) }
    }

    pub fn ctx<'a>(&'a self, pin: &'a str) -> Option<HardenedUnlock<'a>> {
        self.evaluator
            .as_deref()
            .map(|evaluator| HardenedUnlock { evaluator, pin })
    }
}

pub struct Session {
    pub token: TokenHandle,
    pub session: TokenSession,
    pub unlocked: UnlockedStore,
}

/// Full unlock: token PIN, store load, mode-appropriate master recovery,
/// decryption of every record.
pub fn unlock_full(cfg: &CliConfig, pin: &str) -> Result<Session, CliError> {
    let (token, session) = open_token(cfg, pin)?;
    let store = load_store(&cfg.store_path)?;
    let support = UnlockSupport::for_store(cfg, &store);
    let unlocked = cred_store::unlock(&token, &session, &store, support.ctx(pin).as_ref())?;
    Ok(Session { token, session, unlocked })
}

fn persist(unlocked: &UnlockedStore, cfg: &CliConfig) -> Result<(), CliError> {
    save_store(unlocked.encrypted(), &cfg.store_path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// enroll
// ---------------------------------------------------------------------------

pub fn cmd_enroll(
    cfg: &CliConfig,
    pin: &str,
    puk: &str,
    seed: Option<[u8; 32]>,
) -> Result<Outcome, CliError> {
    if cfg.store_path.exists() {
        return Err(CliError::StoreExists);
    }

    let mut token = if cfg.token_path.exists() {
        TokenHandle::load(&cfg.token_path)?
    } else {
        let seed = seed.unwrap_or_else(|| {
            let mut s = [0u8; 32];
            OsRng.fill_bytes(&mut s);
            s
        });
        let token = TokenHandle::create_with_params(pin, puk, &seed, cfg.kdf)?;
        token
            .save(&cfg.token_path)
            .map_err(|e| CliError::Io(e.to_string()))?;
        token
    };
    let session = token.open_session(pin)?;
    token
        .save(&cfg.token_path)
        .map_err(|e| CliError::Io(e.to_string()))?;

    let store = match cfg.mode {
        Mode::Baseline => {
            // Derivation sanity check; the key itself is never stored.
            derive_master_baseline(&token, &session)?;
            EncryptedStore::new(StoreMode::Baseline, MasterRef::Derived)
        }
        Mode::Hardened => {
            let evaluator = HttpOprf::new(&cfg.oprf_url, &cfg.user_id);
            let key_id = evaluator.server_key_id().map_err(|e| match e {
                OprfError::Unavailable(_) => CliError::OprfUnavailable,
                other => other.into(),
            })?;
            let store = EncryptedStore::new(
                StoreMode::Hardened,
                MasterRef::Hardened(HardenedParams {
                    key_id,
                    stretch: cfg.kdf,
                    sealed_master: None,
                }),
            );
            // Full handshake now so a dead OPRF server fails enrollment
            // before anything is written.
            let x = oprf::derive_verification_input(pin, &store.store_id(), &cfg.kdf)?;
            let y = oprf::run_client(&evaluator, &x, labels::MASTER_LABEL, key_id)
                .map_err(|e| match e {
                    OprfError::Unavailable(_) => CliError::OprfUnavailable,
                    other => other.into(),
                })?;
            derive_master_hardened(&token, &session, &y)?;
            store
        }
    };
    save_store(&store, &cfg.store_path)?;

    Ok(Outcome::new(
        format!(
            "enrolled: mode={:?} store={} token={}",
            cfg.mode,
            cfg.store_path.display(),
            cfg.token_path.display()
        ),
        json!({
            "mode": format!("{:?}", cfg.mode).to_lowercase(),
            "store_id": hex::encode(store.store_id()),
            "records": 0,
        }),
    ))
}

// ---------------------------------------------------------------------------
// unlock (verification command)
// ---------------------------------------------------------------------------

pub fn cmd_unlock(cfg: &CliConfig, pin: &str) -> Result<Outcome, CliError> {
    let session = unlock_full(cfg, pin)?;
    let creds = session.unlocked.credentials().count();
    let version = session.unlocked.encrypted().version();
    Ok(Outcome::new(
        format!("unlocked: {creds} credential(s), store version {version}"),
        json!({ "credentials": creds, "version": version }),
    ))
}

// ---------------------------------------------------------------------------
// register / assert
// ---------------------------------------------------------------------------

pub fn cmd_register(
    cfg: &CliConfig,
    pin: &str,
    rp_id: &str,
    user_name: &str,
    use_qes: bool,
) -> Result<Outcome, CliError> {
    let mut session = unlock_full(cfg, pin)?;
    let rp = RpClient::new(&cfg.rp_url);

    let registration_token = if use_qes {
        let challenge = rp.qes_challenge()?;
        let digest: [u8; 32] = Sha256::digest(challenge).into();
        let sigma = session.token.sign_deterministic(&session.session, &digest)?;
        let spki = session.token.public_key_der()?;
        let fingerprint = vfa_rp::qes_fingerprint(&spki);
        Some(rp.qes_prove(&fingerprint, &challenge, &sigma.sigma)?)
    } else {
        None
    };

    let challenge = rp.register_begin(rp_id)?;
    let client_data = client_data_json("webauthn.create", &challenge, rp_id);
    let params = MakeCredentialParams {
        client_data_hash: Sha256::digest(&client_data).into(),
        rp_id: RpId::new(rp_id)?,
        user_handle: user_name.as_bytes().to_vec(),
        user_name: user_name.to_string(),
        require_uv: true,
        exclude_list: vec![],
    };
    let attestation = ctap::make_credential(&mut session.unlocked, &params, now_ms())?;
    // The sealed record hits disk before the attestation leaves the device.
    persist(&session.unlocked, cfg)?;

    let (credential_id, counter) = rp.register_finish(
        &challenge,
        &attestation.to_bytes(),
        &client_data,
        registration_token.as_deref(),
    )?;

    Ok(Outcome::new(
        format!("registered at {rp_id}: credential {}", hex::encode(&credential_id)),
        json!({
            "rp_id": rp_id,
            "credential_id": hex::encode(&credential_id),
            "counter": counter,
            "qes_gated": use_qes,
        }),
    ))
}

pub fn cmd_assert(cfg: &CliConfig, pin: &str, rp_id: &str) -> Result<Outcome, CliError> {
    let mut session = unlock_full(cfg, pin)?;
    let rp = RpClient::new(&cfg.rp_url);

    let challenge = rp.login_begin()?;
    let client_data = client_data_json("webauthn.get", &challenge, rp_id);
    let params = GetAssertionParams {
        client_data_hash: Sha256::digest(&client_data).into(),
        rp_id: RpId::new(rp_id)?,
        allow_list: None,
    };
    let assertion = ctap::get_assertion(&mut session.unlocked, &params)?;
    // Counter must be durable before the signature is released.
    persist(&session.unlocked, cfg)?;

    let counter = rp.login_finish(
        &assertion.credential_id.0,
        &assertion.auth_data,
        &assertion.signature,
        &assertion.user_handle,
        &client_data,
    )?;

    Ok(Outcome::new(
        format!("asserted at {rp_id}: counter {counter}"),
        json!({
            "rp_id": rp_id,
            "credential_id": assertion.credential_id.to_string(),
            "counter": counter,
        }),
    ))
}

// ---------------------------------------------------------------------------
// sync / device-add
// ---------------------------------------------------------------------------

fn sync_transport(cfg: &CliConfig) -> Result<HttpSync, CliError> {
    let bearer = cfg
        .bearer_secret
        .as_ref()
        .ok_or_else(|| CliError::Usage("sync requires a bearer secret (--bearer)".into()))?;
    Ok(HttpSync::new(&cfg.sync_url, bearer))
}

pub fn cmd_sync_push(cfg: &CliConfig, pin: &str) -> Result<Outcome, CliError> {
    let session = unlock_full(cfg, pin)?;
    let transport = sync_transport(cfg)?;
    let (merged, version) = sync::sync_push_with_merge(
        &transport,
        session.unlocked.encrypted(),
        session.unlocked.master(),
        now_ms(),
    )?;
    save_store(&merged, &cfg.store_path)?;
    Ok(Outcome::new(
        format!("pushed store (server version {version})"),
        json!({ "server_version": version, "store_version": merged.version() }),
    ))
}

pub fn cmd_sync_pull(cfg: &CliConfig, pin: &str) -> Result<Outcome, CliError> {
    let transport = sync_transport(cfg)?;
    let (remote, version) = sync::pull_store(&transport)?;

    let merged = if cfg.store_path.exists() {
        let session = unlock_full(cfg, pin)?;
        let merged = sync::merge_stores(
            session.unlocked.master(),
            session.unlocked.encrypted(),
            &remote,
            now_ms(),
        )?;
        save_store(&merged, &cfg.store_path)?;
        merged
    } else {
        save_store(&remote, &cfg.store_path)?;
        remote
    };

    Ok(Outcome::new(
        format!("pulled store (server version {version})"),
        json!({ "server_version": version, "store_version": merged.version() }),
    ))
}

/// New-device onboarding: pull the encrypted store, recover the master key
/// through the (same-seed) token, decrypt everything, and keep the store.
pub fn cmd_device_add(cfg: &CliConfig, pin: &str) -> Result<Outcome, CliError> {
    if cfg.store_path.exists() {
        return Err(CliError::StoreExists);
    }
    let (token, session) = open_token(cfg, pin)?;
    let transport = sync_transport(cfg)?;
    let (store, version) = sync::pull_store(&transport)?;
    let support = UnlockSupport::for_store(cfg, &store);
    let unlocked = cred_store::unlock(&token, &session, &store, support.ctx(pin).as_ref())?;
    save_store(unlocked.encrypted(), &cfg.store_path)?;

    let creds = unlocked.credentials().count();
    Ok(Outcome::new(
        format!("device added: {creds} credential(s) imported (server version {version})"),
        json!({ "credentials": creds, "server_version": version }),
    ))
}

// ---------------------------------------------------------------------------
// rotate
// ---------------------------------------------------------------------------

/// Re-seal the store under a fresh random master key.
///
/// Baseline stores migrate to the wrapped-key mechanism (the derived key is
/// fixed by the token and cannot rotate); hardened stores seal the fresh key
/// under the OPRF-derived key.
pub fn cmd_rotate(cfg: &CliConfig, pin: &str) -> Result<Outcome, CliError> {
    let session = unlock_full(cfg, pin)?;
    let store = session.unlocked.encrypted();

    let mut entropy = [0u8; 32];
    OsRng.fill_bytes(&mut entropy);

    let (new_master, new_ref) = match store.master_ref() {
        MasterRef::Derived | MasterRef::Wrapped(_) => {
            let (new_master, wmk) =
                enroll_master_wrapped(&session.token, &session.session, &entropy, now_ms())?;
            (new_master, MasterRef::Wrapped(wmk))
        }
        MasterRef::Hardened(params) => {
            let support = UnlockSupport::for_store(cfg, store);
            let ctx = support.ctx(pin);
            let ctx = ctx.as_ref().ok_or(CliError::OprfUnavailable)?;
            let x = oprf::derive_verification_input(pin, &store.store_id(), &params.stretch)?;
            let y = oprf::run_client(ctx.evaluator, &x, labels::MASTER_LABEL, params.key_id)?;
            let derived = derive_master_hardened(&session.token, &session.session, &y)?;
            let new_master = MasterKey::from_bytes(
                entropy,
                vfa_core::key_hierarchy::KeyOrigin::DerivedHardened,
            );
            let sealed =
                cred_store::seal_master_under(&derived, &new_master, &store.store_id());
            (
                new_master,
                MasterRef::Hardened(HardenedParams {
                    key_id: params.key_id,
                    stretch: params.stretch,
                    sealed_master: Some(sealed),
                }),
            )
        }
    };

    let mut rotated = rotate_master(session.unlocked.master(), &new_master, store)?;
    rotated.set_master_ref(new_ref);
    save_store(&rotated, &cfg.store_path)?;

    Ok(Outcome::new(
        format!(
            "rotated master key: {} record(s) re-sealed, store version {}",
            rotated.records().len(),
            rotated.version()
        ),
        json!({
            "records": rotated.records().len(),
            "version": rotated.version(),
        }),
    ))
}
