//! Minimal COSE_Key handling for ES256 (P-256 ECDSA) public keys.
//!
//! Emits the CTAP2 canonical map `{1: 2, 3: -7, -1: 1, -2: x, -3: y}` and
//! parses it back, validating that the coordinates form a point on the
//! curve.

use ciborium::value::{Integer, Value};
use p256::ecdsa::VerifyingKey;
use p256::elliptic_curve::sec1::FromEncodedPoint;
use p256::{EncodedPoint, PublicKey};

pub const COSE_KTY_EC2: i64 = 2;
pub const COSE_ALG_ES256: i64 = -7;
pub const COSE_CRV_P256: i64 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CoseError {
    #[error("malformed COSE key: {0}")]
    Malformed(&'static str),
    #[error("unsupported COSE algorithm or curve")]
    Unsupported,
    #[error("coordinates are not a valid P-256 point")]
    InvalidPoint,
}

/// Encode a P-256 verifying key as a canonical CTAP2 COSE map.
pub fn encode_es256(key: &VerifyingKey) -> Vec<u8> {
    let point = key.to_encoded_point(false);
    let x = point.x().expect("uncompressed point has x").to_vec();
    let y = point.y().expect("uncompressed point has y").to_vec();
    let map = Value::Map(vec![
        (int(1), int(COSE_KTY_EC2)),
        (int(3), int(COSE_ALG_ES256)),
        (int(-1), int(COSE_CRV_P256)),
        (int(-2), Value::Bytes(x)),
        (int(-3), Value::Bytes(y)),
    ]);
    let mut out = Vec::new();
    ciborium::into_writer(&map, &mut out).expect("CBOR to vec cannot fail");
    out
}

fn int(v: i64) -> Value {
    Value::Integer(Integer::from(v))
}

/// Decode and validate an ES256 COSE key.
pub fn decode_es256(bytes: &[u8]) -> Result<VerifyingKey, CoseError> {
    let value: Value =
        ciborium::from_reader(bytes).map_err(|_| CoseError::Malformed("bad CBOR"))?;
    decode_es256_value(&value)
}

/// Decode an ES256 COSE key already parsed as a CBOR value (used when the
/// key is embedded in a larger structure).
pub fn decode_es256_value(value: &Value) -> Result<VerifyingKey, CoseError> {
    let entries = value
        .as_map()
        .ok_or(CoseError::Malformed("not a map"))?;
    let mut kty = None;
    let mut alg = None;
    let mut crv = None;
    let mut x: Option<&[u8]> = None;
    let mut y: Option<&[u8]> = None;
    for (k, v) in entries {
        let Some(label) = k.as_integer().and_then(|i| i128::from(i).try_into().ok()) else {
            continue;
        };
        match label {
            1i64 => kty = v.as_integer().map(i128::from),
            3 => alg = v.as_integer().map(i128::from),
            -1 => crv = v.as_integer().map(i128::from),
            -2 => x = v.as_bytes().map(|b| b.as_slice()),
            -3 => y = v.as_bytes().map(|b| b.as_slice()),
            _ => {}
        }
    }
    if kty != Some(COSE_KTY_EC2 as i128)
        || alg != Some(COSE_ALG_ES256 as i128)
        || crv != Some(COSE_CRV_P256 as i128)
    {
        return Err(CoseError::Unsupported);
    }
    let (x, y) = match (x, y) {
        (Some(x), Some(y)) if x.len() == 32 && y.len() == 32 => (x, y),
        _ => return Err(CoseError::Malformed("missing or mis-sized coordinates")),
    };
    let point = EncodedPoint::from_affine_coordinates(x.into(), y.into(), false);
    let key: Option<PublicKey> = PublicKey::from_encoded_point(&point).into();
    key.map(|k| VerifyingKey::from(&k))
        .ok_or(CoseError::InvalidPoint)
}
