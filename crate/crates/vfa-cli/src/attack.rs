//! Cross-protocol attack demonstration.
//!
//! The adversary model: malware (or a malicious document-signing app) that
//! can present signing requests to the user's token and has stolen the
//! ciphertext store (local disk or cloud dump). The token interface is the
//! only thing it shares with the authenticator; everything else below is the
//! adversary's own code working from the published formats.
//!
//! Baseline stores fall: the deterministic signature over the fixed label is
//! the only secret input, so one approved foreign signing request yields the
//! master key offline. Hardened stores additionally require the OPRF output
//! bound to the user's verification PIN, turning the attack into an online,
//! rate-limited guessing game.

use aes_gcm::aead::{Aead, Payload};
use aes_gcm::{Aes256Gcm, Key, KeyInit, Nonce};
use hkdf::Hkdf;
use serde_json::json;
use sha2::{Digest, Sha256};

use vfa_core::cred_store::{self, EncryptedStore, MasterRef};
use vfa_core::key_hierarchy::labels;
use vfa_core::oprf::{
    derive_verification_input, oprf_blind, oprf_direct, oprf_finalize, OprfError, OprfEvaluator,
    OprfOutput, OprfServerKey,
};
use vfa_core::soft_token::TokenHandle;

use crate::{CliError, Outcome};

/// What the demo reports. `decrypted` counts records whose AEAD opened.
#[derive(Debug)]
pub struct AttackReport {
    pub variant: &'static str,
    pub records_total: usize,
    pub decrypted: usize,
    pub guesses_tried: u32,
    pub online_evaluations: u32,
    pub rate_limited: u32,
    pub succeeded: bool,
}

impl AttackReport {
    pub fn outcome_line(&self) -> String {
        if self.succeeded {
            format!(
                "ATTACK SUCCEEDED: {} of {} records decrypted",
                self.decrypted, self.records_total
            )
        } else if self.rate_limited > 0 {
            format!(
                "ATTACK FAILED: 0 decrypted; online budget exhausted \
                 ({} evaluated, {} rate-limited of {} guesses)",
                self.online_evaluations, self.rate_limited, self.guesses_tried
            )
        } else {
            format!(
                "ATTACK FAILED: 0 decrypted after {} guesses",
                self.guesses_tried
            )
        }
    }

    pub fn to_outcome(&self) -> Outcome {
        let mut human = String::new();
        human.push_str(&format!("variant: {}\n", self.variant));
        human.push_str(&format!("records in stolen store: {}\n", self.records_total));
        if self.guesses_tried > 0 {
            human.push_str(&format!("PIN guesses tried: {}\n", self.guesses_tried));
            human.push_str(&format!(
                "online OPRF evaluations: {} (rate-limited: {})\n",
                self.online_evaluations, self.rate_limited
            ));
        }
        human.push_str(&self.outcome_line());
        Outcome::new(
            human,
            json!({
                "variant": self.variant,
                "records_total": self.records_total,
                "decrypted": self.decrypted,
                "guesses_tried": self.guesses_tried,
                "online_evaluations": self.online_evaluations,
                "rate_limited": self.rate_limited,
                "succeeded": self.succeeded,
                "outcome": self.outcome_line(),
            }),
        )
    }
}

/// The foreign-application path: obtain σ through nothing but the token
/// interface, as any PKCS#11 client presenting `H(label)` for signing would.
/// The user "approves" by entering the PIN on the familiar token dialog.
pub fn foreign_application_sigma(
    token: &mut TokenHandle,
    pin: &str,
) -> Result<Vec<u8>, CliError> {
    let session = token.open_session(pin)?;
    let digest: [u8; 32] = Sha256::digest(labels::MASTER_LABEL).into();
    Ok(token.sign_deterministic(&session, &digest)?.sigma)
}

// ---- the adversary's own crypto (from the published format, not the
// authenticator implementation) ----------------------------------------------

fn adversary_hkdf(ikm: &[u8], info: &[u8]) -> [u8; 32] {
    let mut key = [0u8; 32];
    Hkdf::<Sha256>::new(None, ikm)
        .expand(info, &mut key)
        .expect("32 bytes");
    key
}

fn adversary_hardened_key(sigma: &[u8], y: &[u8; 32]) -> [u8; 32] {
    let mut ikm = Vec::with_capacity(8 + sigma.len() + 32);
    ikm.extend_from_slice(&(sigma.len() as u32).to_be_bytes());
    ikm.extend_from_slice(sigma);
    ikm.extend_from_slice(&32u32.to_be_bytes());
    ikm.extend_from_slice(y);
    adversary_hkdf(&ikm, b"VFA-MK-OPRF")
}

/// Try to open record `index` of the stolen store with a candidate key,
/// using the adversary's own AES-GCM calls and the documented AAD layout.
fn adversary_open(store: &EncryptedStore, index: usize, key: &[u8; 32]) -> bool {
    let record = &store.records()[index];
    let mut aad = store.store_id().to_vec();
    aad.extend_from_slice(&(index as u32).to_be_bytes());
    aad.push(0x01);
    let cipher = Aes256Gcm::new(&Key::<Aes256Gcm>::from(*key));
    cipher
        .decrypt(
            &Nonce::from(record.nonce),
            Payload { msg: &record.ciphertext, aad: &aad },
        )
        .is_ok()
}

fn count_decrypted(store: &EncryptedStore, key: &[u8; 32]) -> usize {
    (0..store.records().len())
        .filter(|&i| adversary_open(store, i, key))
        .count()
}

/// Baseline attack: σ in hand, derive the master key offline and decrypt
/// the stolen store.
pub fn baseline_attack(store_bytes: &[u8], sigma: &[u8]) -> Result<AttackReport, CliError> {
    let store = cred_store::store_from_bytes(store_bytes)?;
    let key = adversary_hkdf(sigma, b"VFA-MK");
    let decrypted = count_decrypted(&store, &key);
    Ok(AttackReport {
        variant: "baseline",
        records_total: store.records().len(),
        decrypted,
        guesses_tried: 0,
        online_evaluations: 0,
        rate_limited: 0,
        succeeded: decrypted == store.records().len() && decrypted > 0,
    })
}

/// Hardened attack: σ in hand, the correct PIN unknown. Every candidate y
/// requires one online OPRF evaluation, which the server rate-limits.
pub fn hardened_attack(
    store_bytes: &[u8],
    sigma: &[u8],
    evaluator: &dyn OprfEvaluator,
    guesses: &[String],
) -> Result<AttackReport, CliError> {
    let store = cred_store::store_from_bytes(store_bytes)?;
    let MasterRef::Hardened(params) = store.master_ref() else {
        return Err(CliError::Usage("store is not hardened".into()));
    };
    if store.records().is_empty() {
        return Err(CliError::Usage("attack demo needs at least one record".into()));
    }

    let mut online = 0u32;
    let mut limited = 0u32;
    let mut decrypted = 0usize;
    for pin_guess in guesses {
        let x = derive_verification_input(pin_guess, &store.store_id(), &params.stretch)?;
        let (blinded, mut state) = oprf_blind(&x, labels::MASTER_LABEL, &mut rand::rngs::OsRng);
        let evaluated = match evaluator.evaluate(params.key_id, &blinded) {
            Ok(e) => {
                online += 1;
                e
            }
            Err(OprfError::RateLimited) => {
                limited += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let y = oprf_finalize(&mut state, &evaluated).map_err(CliError::from)?;
        let key = adversary_hardened_key(sigma, y.as_bytes());
        decrypted = decrypted.max(count_decrypted(&store, &key));
        if decrypted > 0 {
            break;
        }
    }

    Ok(AttackReport {
        variant: "hardened",
        records_total: store.records().len(),
        decrypted,
        guesses_tried: guesses.len() as u32,
        online_evaluations: online,
        rate_limited: limited,
        succeeded: decrypted > 0,
    })
}

/// Extended scenario: the adversary additionally stole the OPRF server key,
/// so candidate y values come from offline direct evaluation — no rate
/// limit. Still fails until the true PIN enters the guess list; the report
/// counts the offline guesses as online-equivalent work.
pub fn hardened_attack_with_stolen_key(
    store_bytes: &[u8],
    sigma: &[u8],
    oprf_key: &OprfServerKey,
    guesses: &[String],
) -> Result<AttackReport, CliError> {
    let store = cred_store::store_from_bytes(store_bytes)?;
    let MasterRef::Hardened(params) = store.master_ref() else {
        return Err(CliError::Usage("store is not hardened".into()));
    };

    let mut decrypted = 0usize;
    let mut tried = 0u32;
    for pin_guess in guesses {
        tried += 1;
        let x = derive_verification_input(pin_guess, &store.store_id(), &params.stretch)?;
        let y: OprfOutput = oprf_direct(oprf_key, &x, labels::MASTER_LABEL);
        let key = adversary_hardened_key(sigma, y.as_bytes());
        decrypted = decrypted.max(count_decrypted(&store, &key));
        if decrypted > 0 {
            break;
        }
    }

    Ok(AttackReport {
        variant: "hardened+stolen-oprf-key",
        records_total: store.records().len(),
        decrypted,
        guesses_tried: tried,
        online_evaluations: 0,
        rate_limited: 0,
        succeeded: decrypted > 0,
    })
}

/// Wrong-PIN guess list: `count` numeric PINs, skipping the true one.
pub fn guess_list(count: u32, exclude: &str) -> Vec<String> {
    (0..)
        .map(|i| format!("{i:04}"))
        .filter(|g| g != exclude)
        .take(count as usize)
        .collect()
}
