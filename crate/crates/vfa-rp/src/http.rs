//! HTTP test server for the relying party.
//!
//! JSON bodies with base64url byte fields:
//!
//! * `POST /register/begin {rp_id}` → `{challenge, rp_id, expires_at}`
//! * `POST /register/finish {challenge, attestation_object, client_data,
//!   registration_token?}` → `{credential_id, counter}`
//! * `POST /login/begin {}` → `{challenge, expires_at}`
//! * `POST /login/finish {credential_id, auth_data, signature, user_handle,
//!   client_data}` → `{credential_id, counter}`
//! * `POST /qes/challenge {}` → `{challenge}`
//! * `POST /qes/prove {fingerprint, challenge, signature}` →
//!   `{registration_token, expires_at}`
//! * `POST /qes/enroll {spki_der}` → `{fingerprint}` (test-harness
//!   convenience; real deployments enroll token keys out of band)
//!
//! Errors are `{"error": "<code>"}` with a 4xx status.

use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use base64::engine::general_purpose::URL_SAFE_NO_PAD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::{AssertionInput, RegistrationChallenge, RelyingParty, RpError};

pub fn router(rp: Arc<RelyingParty>) -> Router {
    Router::new()
        .route("/register/begin", post(register_begin))
        .route("/register/finish", post(register_finish))
        .route("/login/begin", post(login_begin))
        .route("/login/finish", post(login_finish))
        .route("/qes/challenge", post(qes_challenge))
        .route("/qes/prove", post(qes_prove))
        .route("/qes/enroll", post(qes_enroll))
        .with_state(rp)
}

/// Bind and serve until the process ends. Prints the bound address so
/// callers on ephemeral ports can discover it.
pub async fn serve(rp: Arc<RelyingParty>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    println!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(rp)).await
}

struct ApiError(StatusCode, &'static str);

impl From<RpError> for ApiError {
    fn from(e: RpError) -> Self {
        let status = match &e {
            RpError::ChallengeMismatch | RpError::Expired | RpError::BadRequest(_) => {
                StatusCode::BAD_REQUEST
            }
            RpError::BadAttestation(_) => StatusCode::BAD_REQUEST,
            RpError::MissingRegistrationToken => StatusCode::FORBIDDEN,
            RpError::BadSignature => StatusCode::UNAUTHORIZED,
            RpError::CounterRegression => StatusCode::CONFLICT,
            RpError::UnknownCredential | RpError::UnknownToken => StatusCode::NOT_FOUND,
        };
        ApiError(status, e.code())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn decode(field: &str) -> Result<Vec<u8>, ApiError> {
    B64.decode(field.as_bytes())
        .map_err(|_| ApiError(StatusCode::BAD_REQUEST, "bad_request"))
}

fn decode32(field: &str) -> Result<[u8; 32], ApiError> {
    decode(field)?
        .try_into()
        .map_err(|_| ApiError(StatusCode::BAD_REQUEST, "bad_request"))
}

#[derive(Deserialize)]
struct RegisterBegin {
    rp_id: String,
}

#[derive(Serialize)]
struct ChallengeOut {
    challenge: String,
    rp_id: String,
    expires_at: u64,
}

async fn register_begin(
    State(rp): State<Arc<RelyingParty>>,
    Json(req): Json<RegisterBegin>,
) -> Result<Json<ChallengeOut>, ApiError> {
    let challenge = rp.begin_registration(&req.rp_id);
    Ok(Json(ChallengeOut {
        challenge: B64.encode(challenge.challenge),
        rp_id: challenge.rp_id,
        expires_at: challenge.expires_at,
    }))
}

#[derive(Deserialize)]
struct RegisterFinish {
    challenge: String,
    attestation_object: String,
    client_data: String,
    #[serde(default)]
    registration_token: Option<String>,
}

#[derive(Serialize)]
struct CredentialOut {
    credential_id: String,
    counter: u32,
}

async fn register_finish(
    State(rp): State<Arc<RelyingParty>>,
    Json(req): Json<RegisterFinish>,
) -> Result<Json<CredentialOut>, ApiError> {
    let challenge_bytes = decode32(&req.challenge)?;
    let pending = rp
        .pending_registration(&challenge_bytes)
        .ok_or(ApiError::from(RpError::ChallengeMismatch))?;
    let registration_token = match &req.registration_token {
        None => None,
        Some(t) => Some(decode(t)?),
    };
    let challenge = RegistrationChallenge { registration_token, ..pending };
    let stored = rp.verify_registration(
        &challenge,
        &decode(&req.attestation_object)?,
        &decode(&req.client_data)?,
    )?;
    Ok(Json(CredentialOut {
        credential_id: B64.encode(&stored.credential_id),
        counter: stored.last_counter,
    }))
}

#[derive(Serialize)]
struct LoginChallengeOut {
    challenge: String,
    expires_at: u64,
}

async fn login_begin(
    State(rp): State<Arc<RelyingParty>>,
) -> Result<Json<LoginChallengeOut>, ApiError> {
    let challenge = rp.begin_login();
    Ok(Json(LoginChallengeOut {
        challenge: B64.encode(challenge.challenge),
        expires_at: challenge.expires_at,
    }))
}

#[derive(Deserialize)]
struct LoginFinish {
    credential_id: String,
    auth_data: String,
    signature: String,
    #[serde(default)]
    user_handle: String,
    client_data: String,
}

async fn login_finish(
    State(rp): State<Arc<RelyingParty>>,
    Json(req): Json<LoginFinish>,
) -> Result<Json<CredentialOut>, ApiError> {
    let accepted = rp.verify_assertion(&AssertionInput {
        credential_id: decode(&req.credential_id)?,
        auth_data: decode(&req.auth_data)?,
        signature: decode(&req.signature)?,
        user_handle: decode(&req.user_handle)?,
        client_data: decode(&req.client_data)?,
    })?;
    Ok(Json(CredentialOut {
        credential_id: B64.encode(&accepted.credential_id),
        counter: accepted.counter,
    }))
}

#[derive(Serialize)]
struct QesChallengeOut {
    challenge: String,
}

async fn qes_challenge(
    State(rp): State<Arc<RelyingParty>>,
) -> Result<Json<QesChallengeOut>, ApiError> {
    Ok(Json(QesChallengeOut { challenge: B64.encode(rp.qes_challenge()) }))
}

#[derive(Deserialize)]
struct QesProve {
    fingerprint: String,
    challenge: String,
    signature: String,
}

#[derive(Serialize)]
struct QesProveOut {
    registration_token: String,
    expires_at: u64,
}

async fn qes_prove(
    State(rp): State<Arc<RelyingParty>>,
    Json(req): Json<QesProve>,
) -> Result<Json<QesProveOut>, ApiError> {
    let fingerprint: [u8; 8] = decode(&req.fingerprint)?
        .try_into()
        .map_err(|_| ApiError(StatusCode::BAD_REQUEST, "bad_request"))?;
    let token = rp.qes_prove(fingerprint, decode32(&req.challenge)?, &decode(&req.signature)?)?;
    Ok(Json(QesProveOut {
        registration_token: B64.encode(token.token),
        expires_at: token.expires_at,
    }))
}

#[derive(Deserialize)]
struct QesEnroll {
    spki_der: String,
}

#[derive(Serialize)]
struct QesEnrollOut {
    fingerprint: String,
}

async fn qes_enroll(
    State(rp): State<Arc<RelyingParty>>,
    Json(req): Json<QesEnroll>,
) -> Result<Json<QesEnrollOut>, ApiError> {
    let fingerprint = rp.register_qes_key(&decode(&req.spki_der)?)?;
    Ok(Json(QesEnrollOut { fingerprint: B64.encode(fingerprint) }))
}
