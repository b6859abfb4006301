//! Parsers for the untrusted structures a relying party receives:
//! attestation objects, authenticator data, COSE keys, and collected client
//! data. Strict about lengths, trailing bytes, and flag consistency.

use ciborium::value::Value;
use p256::ecdsa::VerifyingKey;
use p256::elliptic_curve::sec1::FromEncodedPoint;
use p256::{EncodedPoint, PublicKey};
use serde::Deserialize;

pub const FLAG_AT: u8 = 0x40;
pub const FLAG_ED: u8 = 0x80;

/// Longest credential id WebAuthn permits.
pub const MAX_CREDENTIAL_ID_LEN: usize = 1023;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("malformed CBOR")]
    BadCbor,
    #[error("malformed JSON")]
    BadJson,
    #[error("structure invalid: {0}")]
    Invalid(&'static str),
}

/// `{fmt, attStmt: {alg, sig}, authData}` pulled apart, nothing verified.
#[derive(Debug, Clone)]
pub struct ParsedAttestation {
    pub fmt: String,
    pub auth_data: Vec<u8>,
    pub alg: i64,
    pub signature: Vec<u8>,
}

pub fn parse_attestation_object(bytes: &[u8]) -> Result<ParsedAttestation, ParseError> {
    let value = read_single_item(bytes)?;
    let map = value.as_map().ok_or(ParseError::Invalid("not a map"))?;
    let mut fmt = None;
    let mut auth_data = None;
    let mut alg = None;
    let mut signature = None;
    for (k, v) in map {
        match k.as_text() {
            Some("fmt") => fmt = v.as_text().map(str::to_string),
            Some("authData") => auth_data = v.as_bytes().cloned(),
            Some("attStmt") => {
                let stmt = v.as_map().ok_or(ParseError::Invalid("attStmt not a map"))?;
                for (sk, sv) in stmt {
                    match sk.as_text() {
                        Some("alg") => {
                            alg = sv.as_integer().and_then(|i| i128::from(i).try_into().ok())
                        }
                        Some("sig") => signature = sv.as_bytes().cloned(),
                        _ => {}
                    }
                }
            }
            _ => {}
        }
    }
    Ok(ParsedAttestation {
        fmt: fmt.ok_or(ParseError::Invalid("missing fmt"))?,
        auth_data: auth_data.ok_or(ParseError::Invalid("missing authData"))?,
        alg: alg.ok_or(ParseError::Invalid("missing alg"))?,
        signature: signature.ok_or(ParseError::Invalid("missing sig"))?,
    })
}

#[derive(Debug, Clone)]
pub struct AttestedData {
    pub aaguid: [u8; 16],
    pub credential_id: Vec<u8>,
    pub cose_key: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct ParsedAuthenticatorData {
    pub rp_id_hash: [u8; 32],
    pub flags: u8,
    pub counter: u32,
    pub attested: Option<AttestedData>,
}

/// Byte-exact authenticator-data parse. The AT flag and the attested block
/// must be present together, extensions are not accepted, and the COSE key
/// must consume the remaining bytes exactly.
pub fn parse_authenticator_data(bytes: &[u8]) -> Result<ParsedAuthenticatorData, ParseError> {
    if bytes.len() < 37 {
        return Err(ParseError::Invalid("shorter than 37 bytes"));
    }
    let rp_id_hash: [u8; 32] = bytes[0..32].try_into().unwrap();
    let flags = bytes[32];
    let counter = u32::from_be_bytes(bytes[33..37].try_into().unwrap());
    if flags & FLAG_ED != 0 {
        return Err(ParseError::Invalid("extension data not supported"));
    }

    let rest = &bytes[37..];
    let attested = if flags & FLAG_AT != 0 {
        if rest.len() < 18 {
            return Err(ParseError::Invalid("attested data truncated"));
        }
        let aaguid: [u8; 16] = rest[0..16].try_into().unwrap();
        let id_len = u16::from_be_bytes(rest[16..18].try_into().unwrap()) as usize;
        if id_len == 0 || id_len > MAX_CREDENTIAL_ID_LEN {
            return Err(ParseError::Invalid("credential id length out of range"));
        }
        if rest.len() < 18 + id_len {
            return Err(ParseError::Invalid("credential id truncated"));
        }
        let credential_id = rest[18..18 + id_len].to_vec();
        let cose_key = rest[18 + id_len..].to_vec();
        // Must be exactly one CBOR item.
        let consumed = cbor_item_len(&cose_key)?;
        if consumed != cose_key.len() {
            return Err(ParseError::Invalid("trailing bytes after COSE key"));
        }
        Some(AttestedData { aaguid, credential_id, cose_key })
    } else {
        if !rest.is_empty() {
            return Err(ParseError::Invalid("trailing bytes without AT flag"));
        }
        None
    };
    Ok(ParsedAuthenticatorData { rp_id_hash, flags, counter, attested })
}

/// Decode and validate an ES256 COSE key: EC2 / ES256 / P-256, 32-byte
/// coordinates forming a point on the curve.
pub fn parse_cose_es256(bytes: &[u8]) -> Result<VerifyingKey, ParseError> {
    let value = read_single_item(bytes)?;
    let map = value.as_map().ok_or(ParseError::Invalid("not a map"))?;
    let mut kty = None;
    let mut alg = None;
    let mut crv = None;
    let mut x = None;
    let mut y = None;
    for (k, v) in map {
        let Some(label) = k.as_integer().map(i128::from) else { continue };
        match label {
            1 => kty = v.as_integer().map(i128::from),
            3 => alg = v.as_integer().map(i128::from),
            -1 => crv = v.as_integer().map(i128::from),
            -2 => x = v.as_bytes().cloned(),
            -3 => y = v.as_bytes().cloned(),
            _ => {}
        }
    }
    if kty != Some(2) || alg != Some(-7) || crv != Some(1) {
        return Err(ParseError::Invalid("unsupported key type"));
    }
    let (x, y) = match (x, y) {
        (Some(x), Some(y)) if x.len() == 32 && y.len() == 32 => (x, y),
        _ => return Err(ParseError::Invalid("bad coordinates")),
    };
    let point =
        EncodedPoint::from_affine_coordinates(x.as_slice().into(), y.as_slice().into(), false);
    let key: Option<PublicKey> = PublicKey::from_encoded_point(&point).into();
    key.map(|k| VerifyingKey::from(&k))
        .ok_or(ParseError::Invalid("not on curve"))
}

/// Collected client data as the browser would assemble it.
#[derive(Debug, Clone, Deserialize)]
pub struct CollectedClientData {
    #[serde(rename = "type")]
    pub type_: String,
    #[serde(deserialize_with = "de_base64url")]
    pub challenge: Vec<u8>,
    pub origin: String,
}

pub fn parse_client_data(bytes: &[u8]) -> Result<CollectedClientData, ParseError> {
    serde_json::from_slice(bytes).map_err(|_| ParseError::BadJson)
}

fn de_base64url<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
    use base64::Engine;
    let s = String::deserialize(d)?;
    base64::engine::general_purpose::URL_SAFE_NO_PAD
        .decode(s.as_bytes())
        .map_err(serde::de::Error::custom)
}

// ---- CBOR helpers ---------------------------------------------------------

struct CountingReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl std::io::Read for CountingReader<'_> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let remaining = &self.data[self.pos.min(self.data.len())..];
        let n = remaining.len().min(buf.len());
        buf[..n].copy_from_slice(&remaining[..n]);
        self.pos += n;
        Ok(n)
    }
}

/// Parse one CBOR item, rejecting trailing bytes.
fn read_single_item(bytes: &[u8]) -> Result<Value, ParseError> {
    let mut reader = CountingReader { data: bytes, pos: 0 };
    let value: Value = ciborium::from_reader(&mut reader).map_err(|_| ParseError::BadCbor)?;
    if reader.pos != bytes.len() {
        return Err(ParseError::Invalid("trailing bytes after CBOR item"));
    }
    Ok(value)
}

/// Length in bytes of the first CBOR item in `bytes`.
fn cbor_item_len(bytes: &[u8]) -> Result<usize, ParseError> {
    let mut reader = CountingReader { data: bytes, pos: 0 };
    let _: Value = ciborium::from_reader(&mut reader).map_err(|_| ParseError::BadCbor)?;
    Ok(reader.pos)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auth_data_without_at_must_be_exactly_37_bytes() {
        let mut data = vec![0u8; 37];
        data[32] = 0x05;
        assert!(parse_authenticator_data(&data).is_ok());
        data.push(0);
        assert_eq!(
            parse_authenticator_data(&data).map(|_| ()),
            Err(ParseError::Invalid("trailing bytes without AT flag"))
        );
    }

    #[test]
    fn truncated_and_garbage_inputs_error_not_panic() {
        for len in 0..40 {
            let data = vec![0xFFu8; len];
            let _ = parse_authenticator_data(&data);
            let _ = parse_attestation_object(&data);
            let _ = parse_cose_es256(&data);
            let _ = parse_client_data(&data);
        }
    }
}
