//! HTTP servers for the sync blob store and the OPRF service. The relying
//! party is served through `vfa_rp::http`.
//!
//! Sync wire protocol:
//! * `GET /v1/store` → `200` body = envelope bytes, `X-Store-Version`
//!   header; `404` when nothing was pushed; `401` on a bad bearer.
//! * `PUT /v1/store` with `X-Expected-Version` → `200` + `X-Store-Version`,
//!   `409` + current `X-Store-Version` on conflict, `401` unauthorized.
//!
//! OPRF wire protocol:
//! * `POST /v1/oprf/evaluate {key_id, element}` → `{element}`; `400` on a
//!   malformed or identity element, `409` on a key-id mismatch, `429` when
//!   rate-limited. The bearer string identifies the caller for limiting.
//! * `GET /v1/oprf/key` → `{key_id}`.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, put};
use axum::{Json, Router};
use base64::engine::general_purpose::URL_SAFE_NO_PAD as B64;
use base64::Engine;
use serde::Deserialize;
use serde_json::json;

use vfa_core::clock::system_clock;
use vfa_core::oprf::{BlindedElement, OprfError, OprfServer, OprfServerKey};
use vfa_core::ratelimit::RateLimitConfig;
use vfa_core::sync::{SyncCredential, SyncError, SyncServer};

use crate::CliError;

// ---------------------------------------------------------------------------
// Sync server
// ---------------------------------------------------------------------------

pub fn sync_router(server: Arc<SyncServer>) -> Router {
    Router::new()
        .route("/v1/store", get(store_get).put(store_put))
        .with_state(server)
}

fn bearer_of(headers: &HeaderMap) -> Option<Vec<u8>> {
    let value = headers.get("authorization")?.to_str().ok()?;
    let encoded = value.strip_prefix("Bearer ")?;
    B64.decode(encoded.as_bytes()).ok()
}

/// The demo server hosts a single user; multi-tenancy is not a goal.
pub const SYNC_USER: &str = "default";

async fn store_get(State(server): State<Arc<SyncServer>>, headers: HeaderMap) -> Response {
    let Some(bearer) = bearer_of(&headers) else {
        return StatusCode::UNAUTHORIZED.into_response();
    };
    match server.get(SYNC_USER, &bearer) {
        Ok((bytes, version)) => (
            StatusCode::OK,
            [("x-store-version", version.to_string())],
            bytes,
        )
            .into_response(),
        Err(SyncError::NotFound) => StatusCode::NOT_FOUND.into_response(),
        Err(SyncError::Unauthorized) => StatusCode::UNAUTHORIZED.into_response(),
        Err(_) => StatusCode::INTERNAL_SERVER_ERROR.into_response(),
    }
}

async fn store_put(
    State(server): State<Arc<SyncServer>>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let Some(bearer) = bearer_of(&headers) else {
        return StatusCode::UNAUTHORIZED.into_response();
    };
    let expected = headers
        .get("x-expected-version")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<u64>().ok());
    let Some(expected) = expected else {
        return StatusCode::BAD_REQUEST.into_response();
    };
    match server.put(SYNC_USER, &bearer, body.to_vec(), expected) {
        Ok(version) => (
            StatusCode::OK,
            [("x-store-version", version.to_string())],
        )
            .into_response(),
        Err(SyncError::VersionConflict { current }) => (
            StatusCode::CONFLICT,
            [("x-store-version", current.to_string())],
        )
            .into_response(),
        Err(SyncError::Unauthorized) => StatusCode::UNAUTHORIZED.into_response(),
        Err(_) => StatusCode::INTERNAL_SERVER_ERROR.into_response(),
    }
}

pub async fn serve_sync(addr: SocketAddr, bearer: [u8; 32]) -> std::io::Result<()> {
    let server = Arc::new(SyncServer::new());
    server.register_user(&SyncCredential {
        user_id: SYNC_USER.to_string(),
        bearer_secret: bearer,
    });
    let listener = tokio::net::TcpListener::bind(addr).await?;
    println!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, sync_router(server)).await
}

// ---------------------------------------------------------------------------
// OPRF server
// ---------------------------------------------------------------------------

pub fn oprf_router(server: Arc<OprfServer>) -> Router {
    Router::new()
        .route("/v1/oprf/evaluate", axum::routing::post(oprf_evaluate))
        .route("/v1/oprf/key", get(oprf_key))
        .with_state(server)
}

#[derive(Deserialize)]
struct EvaluateRequest {
    key_id: String,
    element: String,
}

async fn oprf_evaluate(
    State(server): State<Arc<OprfServer>>,
    headers: HeaderMap,
    Json(req): Json<EvaluateRequest>,
) -> Response {
    let caller = headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .unwrap_or("anonymous")
        .to_string();
    let Some(key_id) = B64
        .decode(req.key_id.as_bytes())
        .ok()
        .and_then(|v| <[u8; 8]>::try_from(v).ok())
    else {
        return (StatusCode::BAD_REQUEST, Json(json!({"error": "bad_key_id"}))).into_response();
    };
    let Some(element) = B64
        .decode(req.element.as_bytes())
        .ok()
        .and_then(|v| <[u8; 32]>::try_from(v).ok())
    else {
        return (
            StatusCode::BAD_REQUEST,
            Json(json!({"error": "invalid_element"})),
        )
            .into_response();
    };
    match server.evaluate(&caller, key_id, &BlindedElement(element)) {
        Ok(evaluated) => Json(json!({ "element": B64.encode(evaluated.0) })).into_response(),
        Err(OprfError::RateLimited) => (
            StatusCode::TOO_MANY_REQUESTS,
            Json(json!({"error": "rate_limited"})),
        )
            .into_response(),
        Err(OprfError::WrongKeyId { .. }) => (
            StatusCode::CONFLICT,
            Json(json!({"error": "wrong_key_id"})),
        )
            .into_response(),
        Err(_) => (
            StatusCode::BAD_REQUEST,
            Json(json!({"error": "invalid_element"})),
        )
            .into_response(),
    }
}

async fn oprf_key(State(server): State<Arc<OprfServer>>) -> Response {
    Json(json!({ "key_id": B64.encode(server.key_id()) })).into_response()
}

/// Load the server PRF key, creating and persisting one on first start.
/// File layout: magic `VFAO`, version byte, 32-byte scalar.
pub fn load_or_create_oprf_key(path: &Path) -> Result<OprfServerKey, CliError> {
    const MAGIC: &[u8; 4] = b"VFAO";
    if path.exists() {
        let bytes = std::fs::read(path)?;
        if bytes.len() != 37 || &bytes[0..4] != MAGIC || bytes[4] != 0x01 {
            return Err(CliError::Corrupt("bad OPRF key file".into()));
        }
        let scalar: [u8; 32] = bytes[5..37].try_into().unwrap();
        OprfServerKey::from_scalar_bytes(&scalar)
            .map_err(|_| CliError::Corrupt("bad OPRF key scalar".into()))
    } else {
        let key = OprfServerKey::generate(&mut rand::rngs::OsRng);
        let mut bytes = Vec::with_capacity(37);
        bytes.extend_from_slice(MAGIC);
        bytes.push(0x01);
        bytes.extend_from_slice(&key.scalar_bytes());
        std::fs::write(path, &bytes)?;
        Ok(key)
    }
}

pub async fn serve_oprf(
    addr: SocketAddr,
    key: OprfServerKey,
    limit: RateLimitConfig,
) -> std::io::Result<()> {
    let server = Arc::new(OprfServer::new(key, limit, system_clock()));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    println!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, oprf_router(server)).await
}
