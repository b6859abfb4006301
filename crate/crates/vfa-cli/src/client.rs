//! HTTP client transports: sync blob store, OPRF evaluation, and the
//! WebAuthn ceremony client (the CLI plays the browser's role).

use base64::engine::general_purpose::URL_SAFE_NO_PAD as B64;
use base64::Engine;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};
use vfa_core::oprf::{BlindedElement, EvaluatedElement, OprfError, OprfEvaluator};
use vfa_core::sync::{SyncError, SyncTransport};

use crate::CliError;

fn http() -> Client {
    Client::builder()
        .timeout(std::time::Duration::from_secs(10))
        .build()
        .expect("reqwest client")
}

// ---------------------------------------------------------------------------
// Sync over HTTP: GET/PUT /v1/store with version headers
// ---------------------------------------------------------------------------

pub struct HttpSync {
    base: String,
    bearer: String,
    client: Client,
}

impl HttpSync {
    pub fn new(base: &str, bearer_secret: &[u8; 32]) -> Self {
        Self {
            base: base.trim_end_matches('/').to_string(),
            bearer: B64.encode(bearer_secret),
            client: http(),
        }
    }
}

fn version_header(resp: &reqwest::blocking::Response) -> Result<u64, SyncError> {
    resp.headers()
        .get("x-store-version")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| SyncError::Transport("missing X-Store-Version".into()))
}

impl SyncTransport for HttpSync {
    fn pull(&self) -> Result<(Vec<u8>, u64), SyncError> {
        let resp = self
            .client
            .get(format!("{}/v1/store", self.base))
            .bearer_auth(&self.bearer)
            .send()
            .map_err(|e| SyncError::Transport(e.to_string()))?;
        match resp.status() {
            StatusCode::OK => {
                let version = version_header(&resp)?;
                let bytes = resp.bytes().map_err(|e| SyncError::Transport(e.to_string()))?;
                Ok((bytes.to_vec(), version))
            }
            StatusCode::NOT_FOUND => Err(SyncError::NotFound),
            StatusCode::UNAUTHORIZED => Err(SyncError::Unauthorized),
            other => Err(SyncError::Transport(format!("unexpected status {other}"))),
        }
    }

    fn push(&self, bytes: &[u8], expected_version: u64) -> Result<u64, SyncError> {
        let resp = self
            .client
            .put(format!("{}/v1/store", self.base))
            .bearer_auth(&self.bearer)
            .header("x-expected-version", expected_version.to_string())
            .body(bytes.to_vec())
            .send()
            .map_err(|e| SyncError::Transport(e.to_string()))?;
        match resp.status() {
            StatusCode::OK => version_header(&resp),
            StatusCode::CONFLICT => {
                let current = version_header(&resp)?;
                Err(SyncError::VersionConflict { current })
            }
            StatusCode::UNAUTHORIZED => Err(SyncError::Unauthorized),
            other => Err(SyncError::Transport(format!("unexpected status {other}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// OPRF over HTTP: POST /v1/oprf/evaluate, GET /v1/oprf/key
// ---------------------------------------------------------------------------

pub struct HttpOprf {
    base: String,
    caller: String,
    client: Client,
}

impl HttpOprf {
    pub fn new(base: &str, caller: &str) -> Self {
        Self {
            base: base.trim_end_matches('/').to_string(),
            caller: caller.to_string(),
            client: http(),
        }
    }
}

impl OprfEvaluator for HttpOprf {
    fn evaluate(
        &self,
        key_id: [u8; 8],
        elem: &BlindedElement,
    ) -> Result<EvaluatedElement, OprfError> {
        let resp = self
            .client
            .post(format!("{}/v1/oprf/evaluate", self.base))
            .bearer_auth(&self.caller)
            .json(&json!({
                "key_id": B64.encode(key_id),
                "element": B64.encode(elem.0),
            }))
            .send()
            .map_err(|e| OprfError::Unavailable(e.to_string()))?;
        match resp.status() {
            StatusCode::OK => {
                let body: Value =
                    resp.json().map_err(|e| OprfError::Unavailable(e.to_string()))?;
                let element = body
                    .get("element")
                    .and_then(Value::as_str)
                    .and_then(|s| B64.decode(s.as_bytes()).ok())
                    .and_then(|v| <[u8; 32]>::try_from(v).ok())
                    .ok_or(OprfError::InvalidElement)?;
                Ok(EvaluatedElement(element))
            }
            StatusCode::TOO_MANY_REQUESTS => Err(OprfError::RateLimited),
            StatusCode::BAD_REQUEST => Err(OprfError::InvalidElement),
            StatusCode::CONFLICT => Err(OprfError::WrongKeyId {
                expected: B64.encode(key_id),
                got: "server".into(),
            }),
            other => Err(OprfError::Unavailable(format!("unexpected status {other}"))),
        }
    }

    fn server_key_id(&self) -> Result<[u8; 8], OprfError> {
        let resp = self
            .client
            .get(format!("{}/v1/oprf/key", self.base))
            .send()
            .map_err(|e| OprfError::Unavailable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(OprfError::Unavailable(format!("status {}", resp.status())));
        }
        let body: Value = resp.json().map_err(|e| OprfError::Unavailable(e.to_string()))?;
        body.get("key_id")
            .and_then(Value::as_str)
            .and_then(|s| B64.decode(s.as_bytes()).ok())
            .and_then(|v| <[u8; 8]>::try_from(v).ok())
            .ok_or_else(|| OprfError::Unavailable("bad key id".into()))
    }
}

// ---------------------------------------------------------------------------
// Relying-party ceremony client
// ---------------------------------------------------------------------------

pub struct RpClient {
    base: String,
    client: Client,
}

/// Build the collected client data JSON the way a browser would.
pub fn client_data_json(type_: &str, challenge: &[u8; 32], rp_id: &str) -> Vec<u8> {
    format!(
        r#"{{"type":"{}","challenge":"{}","origin":"https://{}"}}"#,
        type_,
        B64.encode(challenge),
        rp_id
    )
    .into_bytes()
}

impl RpClient {
    pub fn new(base: &str) -> Self {
        Self { base: base.trim_end_matches('/').to_string(), client: http() }
    }

    fn post(&self, path: &str, body: Value) -> Result<Value, CliError> {
        let resp = self
            .client
            .post(format!("{}{}", self.base, path))
            .json(&body)
            .send()
            .map_err(|e| CliError::Transport(e.to_string()))?;
        let status = resp.status();
        let value: Value = resp
            .json()
            .map_err(|e| CliError::Transport(format!("bad response body: {e}")))?;
        if status.is_success() {
            Ok(value)
        } else {
            let code = value.get("error").and_then(Value::as_str).unwrap_or("unknown");
            Err(CliError::from_rp_code(code))
        }
    }

    pub fn register_begin(&self, rp_id: &str) -> Result<[u8; 32], CliError> {
        let resp = self.post("/register/begin", json!({ "rp_id": rp_id }))?;
        field32(&resp, "challenge")
    }

    pub fn register_finish(
        &self,
        challenge: &[u8; 32],
        attestation_object: &[u8],
        client_data: &[u8],
        registration_token: Option<&[u8]>,
    ) -> Result<(Vec<u8>, u32), CliError> {
        let mut body = json!({
            "challenge": B64.encode(challenge),
            "attestation_object": B64.encode(attestation_object),
            "client_data": B64.encode(client_data),
        });
        if let Some(token) = registration_token {
            body["registration_token"] = Value::String(B64.encode(token));
        }
        let resp = self.post("/register/finish", body)?;
        Ok((field_bytes(&resp, "credential_id")?, field_u32(&resp, "counter")?))
    }

    pub fn login_begin(&self) -> Result<[u8; 32], CliError> {
        let resp = self.post("/login/begin", json!({}))?;
        field32(&resp, "challenge")
    }

    #[allow(clippy::too_many_arguments)]
    pub fn login_finish(
        &self,
        credential_id: &[u8],
        auth_data: &[u8],
        signature: &[u8],
        user_handle: &[u8],
        client_data: &[u8],
    ) -> Result<u32, CliError> {
        let resp = self.post(
            "/login/finish",
            json!({
                "credential_id": B64.encode(credential_id),
                "auth_data": B64.encode(auth_data),
                "signature": B64.encode(signature),
                "user_handle": B64.encode(user_handle),
                "client_data": B64.encode(client_data),
            }),
        )?;
        field_u32(&resp, "counter")
    }

    pub fn qes_challenge(&self) -> Result<[u8; 32], CliError> {
        let resp = self.post("/qes/challenge", json!({}))?;
        field32(&resp, "challenge")
    }

    pub fn qes_prove(
        &self,
        fingerprint: &[u8; 8],
        challenge: &[u8; 32],
        signature: &[u8],
    ) -> Result<Vec<u8>, CliError> {
        let resp = self.post(
            "/qes/prove",
            json!({
                "fingerprint": B64.encode(fingerprint),
                "challenge": B64.encode(challenge),
                "signature": B64.encode(signature),
            }),
        )?;
        field_bytes(&resp, "registration_token")
    }

    pub fn qes_enroll(&self, spki_der: &[u8]) -> Result<[u8; 8], CliError> {
        let resp = self.post("/qes/enroll", json!({ "spki_der": B64.encode(spki_der) }))?;
        let bytes = field_bytes(&resp, "fingerprint")?;
        bytes
            .try_into()
            .map_err(|_| CliError::Transport("bad fingerprint length".into()))
    }
}

fn field_bytes(value: &Value, name: &str) -> Result<Vec<u8>, CliError> {
    value
        .get(name)
        .and_then(Value::as_str)
        .and_then(|s| B64.decode(s.as_bytes()).ok())
        .ok_or_else(|| CliError::Transport(format!("missing field {name}")))
}

fn field32(value: &Value, name: &str) -> Result<[u8; 32], CliError> {
    field_bytes(value, name)?
        .try_into()
        .map_err(|_| CliError::Transport(format!("field {name} has wrong length")))
}

fn field_u32(value: &Value, name: &str) -> Result<u32, CliError> {
    value
        .get(name)
        .and_then(Value::as_u64)
        .and_then(|v| u32::try_from(v).ok())
        .ok_or_else(|| CliError::Transport(format!("missing field {name}")))
}
