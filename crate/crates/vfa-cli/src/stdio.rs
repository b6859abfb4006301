//! Newline-delimited JSON CTAP interface for harness integration.
//!
//! One request per line on stdin, one response per line on stdout:
//!
//! ```text
//! {"op":"make_credential","client_data_hash":"<b64u 32B>","rp_id":"...",
//!  "user_handle":"<b64u>","user_name":"...","exclude_list":["<b64u 16B>"]}
//! {"op":"get_assertion","client_data_hash":"<b64u 32B>","rp_id":"...",
//!  "allow_list":["<b64u 16B>"]}
//! ```
//!
//! Responses are `{"ok":true,...}` or `{"ok":false,"error":"<message>"}`.
//! The store file is saved after each mutating operation, before the
//! response line is emitted.

use base64::engine::general_purpose::URL_SAFE_NO_PAD as B64;
use base64::Engine;
use serde::Deserialize;
use serde_json::json;

use vfa_core::cred_store::{save_store, CredentialId, RpId};
use vfa_core::ctap::{self, GetAssertionParams, MakeCredentialParams};

use crate::commands::{unlock_full, Session};
use crate::config::CliConfig;
use crate::CliError;

#[derive(Debug, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum CtapRequest {
    MakeCredential {
        client_data_hash: String,
        rp_id: String,
        #[serde(default)]
        user_handle: String,
        #[serde(default)]
        user_name: String,
        #[serde(default)]
        require_uv: Option<bool>,
        #[serde(default)]
        exclude_list: Vec<String>,
    },
    GetAssertion {
        client_data_hash: String,
        rp_id: String,
        #[serde(default)]
        allow_list: Option<Vec<String>>,
    },
}

fn decode32(s: &str) -> Result<[u8; 32], CliError> {
    B64.decode(s.as_bytes())
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| CliError::Usage("client_data_hash must be base64url of 32 bytes".into()))
}

fn decode_id(s: &str) -> Result<CredentialId, CliError> {
    B64.decode(s.as_bytes())
        .ok()
        .and_then(|v| <[u8; 16]>::try_from(v).ok())
        .map(CredentialId)
        .ok_or_else(|| CliError::Usage("credential ids are base64url of 16 bytes".into()))
}

/// Parse one request line. Exposed for fuzzing: arbitrary input must error,
/// never panic.
pub fn parse_request(line: &str) -> Result<CtapRequest, CliError> {
    serde_json::from_str(line).map_err(|e| CliError::Usage(format!("bad request: {e}")))
}

fn execute(session: &mut Session, request: CtapRequest) -> Result<serde_json::Value, CliError> {
    match request {
        CtapRequest::MakeCredential {
            client_data_hash,
            rp_id,
            user_handle,
            user_name,
            require_uv,
            exclude_list,
        } => {
            let params = MakeCredentialParams {
                client_data_hash: decode32(&client_data_hash)?,
                rp_id: RpId::new(&rp_id)?,
                user_handle: B64
                    .decode(user_handle.as_bytes())
                    .map_err(|_| CliError::Usage("bad user_handle".into()))?,
                user_name,
                require_uv: require_uv.unwrap_or(true),
                exclude_list: exclude_list
                    .iter()
                    .map(|s| decode_id(s))
                    .collect::<Result<_, _>>()?,
            };
            let now = vfa_core::clock::TimeSource::now_ms(&vfa_core::clock::SystemClock);
            let att = ctap::make_credential(&mut session.unlocked, &params, now)?;
            Ok(json!({
                "ok": true,
                "attestation_object": B64.encode(att.to_bytes()),
                "auth_data": B64.encode(&att.auth_data),
            }))
        }
        CtapRequest::GetAssertion { client_data_hash, rp_id, allow_list } => {
            let params = GetAssertionParams {
                client_data_hash: decode32(&client_data_hash)?,
                rp_id: RpId::new(&rp_id)?,
                allow_list: allow_list
                    .map(|ids| ids.iter().map(|s| decode_id(s)).collect::<Result<_, _>>())
                    .transpose()?,
            };
            let asr = ctap::get_assertion(&mut session.unlocked, &params)?;
            Ok(json!({
                "ok": true,
                "credential_id": B64.encode(asr.credential_id.0),
                "auth_data": B64.encode(&asr.auth_data),
                "signature": B64.encode(&asr.signature),
                "user_handle": B64.encode(&asr.user_handle),
            }))
        }
    }
}

/// Serve requests from `input` to `output` until EOF.
pub fn run(
    cfg: &CliConfig,
    pin: &str,
    input: impl std::io::BufRead,
    mut output: impl std::io::Write,
) -> Result<(), CliError> {
    let mut session = unlock_full(cfg, pin)?;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = parse_request(&line).and_then(|req| {
            let value = execute(&mut session, req)?;
            // Durable before visible.
            save_store(session.unlocked.encrypted(), &cfg.store_path)?;
            Ok(value)
        });
        let line_out = match response {
            Ok(value) => value,
            Err(e) => json!({ "ok": false, "error": e.to_string(), "exit_code": e.exit_code() }),
        };
        writeln!(output, "{line_out}")?;
        output.flush()?;
    }
    Ok(())
}
