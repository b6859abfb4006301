//! Memory-hard stretching of PINs (Argon2id).
//!
//! Two places stretch a PIN: the token-at-rest sealing key and the OPRF
//! verification input. Both record their parameters next to the data they
//! protect, so a store or token file remains openable if the defaults change.

use argon2::{Algorithm, Argon2, Params, Version};
use serde::{Deserialize, Serialize};
use zeroize::Zeroizing;

use crate::soft_token::TokenError;

/// Argon2id cost parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StretchParams {
    /// Memory cost in KiB.
    pub m_cost_kib: u32,
    /// Iterations.
    pub t_cost: u32,
    /// Lanes.
    pub p_cost: u32,
}

impl StretchParams {
    /// Interactive-use default (Argon2id, 19 MiB, t=2, p=1).
    pub const INTERACTIVE: StretchParams = StretchParams {
        m_cost_kib: 19 * 1024,
        t_cost: 2,
        p_cost: 1,
    };

    /// Reduced-cost profile for tests and simulated adversaries. Still
    /// Argon2id, just cheap enough to run thousands of times in CI.
    pub const FAST: StretchParams = StretchParams {
        m_cost_kib: 256,
        t_cost: 1,
        p_cost: 1,
    };

    fn to_argon2(self) -> Result<Argon2<'static>, TokenError> {
        let params = Params::new(self.m_cost_kib, self.t_cost, self.p_cost, Some(32))
            .map_err(|_| TokenError::InvalidKdfParams)?;
        Ok(Argon2::new(Algorithm::Argon2id, Version::V0x13, params))
    }

    /// Stretch `secret` with `salt` into 32 bytes.
    pub fn stretch(&self, secret: &[u8], salt: &[u8]) -> Result<Zeroizing<[u8; 32]>, TokenError> {
        let mut out = Zeroizing::new([0u8; 32]);
        self.to_argon2()?
            .hash_password_into(secret, salt, out.as_mut())
            .map_err(|_| TokenError::InvalidKdfParams)?;
        Ok(out)
    }
}

impl Default for StretchParams {
    fn default() -> Self {
        Self::INTERACTIVE
    }
}
