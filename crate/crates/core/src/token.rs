//! Scope tokens: short-lived signed capabilities the gateway hands the PIM.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{b64, canonical_json};
use crate::keys::{EpochPublicKey, GatewayKeyEpoch};
use crate::schema::ScopeSet;

/// Validity window of a token, in seconds.
pub const TOKEN_LIFETIME_SECS: u64 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TokenError {
    #[error("token signed under epoch {found}, current epoch is {expected}")]
    EpochMismatch { expected: u64, found: u64 },
    #[error("token signature does not verify")]
    SignatureInvalid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ScopeToken {
    pub app_id: String,
    pub authorized_scopes: ScopeSet,
    pub nonce: u64,
    pub issued_at: u64,
    pub expires_at: u64,
    pub key_epoch: u64,
    #[serde(with = "b64")]
    pub signature: Vec<u8>,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct TokenBody<'a> {
    app_id: &'a str,
    authorized_scopes: ScopeSet,
    nonce: u64,
    issued_at: u64,
    expires_at: u64,
    key_epoch: u64,
}

impl ScopeToken {
    /// Builds and signs a token valid for [`TOKEN_LIFETIME_SECS`] from `issued_at`.
    pub fn sign(
        app_id: &str,
        scopes: ScopeSet,
        nonce: u64,
        issued_at: u64,
        epoch: &GatewayKeyEpoch,
    ) -> ScopeToken {
        let mut token = ScopeToken {
            app_id: app_id.to_owned(),
            authorized_scopes: scopes,
            nonce,
            issued_at,
            expires_at: issued_at + TOKEN_LIFETIME_SECS,
            key_epoch: epoch.epoch,
            signature: Vec::new(),
        };
        token.signature = epoch.signing_key.sign(&token.body_bytes()).to_vec();
        token
    }

    pub fn body_bytes(&self) -> Vec<u8> {
        canonical_json(&TokenBody {
            app_id: &self.app_id,
            authorized_scopes: self.authorized_scopes,
            nonce: self.nonce,
            issued_at: self.issued_at,
            expires_at: self.expires_at,
            key_epoch: self.key_epoch,
        })
        .expect("token body serializes")
    }

    /// Checks epoch, signature and the fixed lifetime. Expiry against a clock
    /// is the PIM's job.
    pub fn verify(&self, key: &EpochPublicKey) -> Result<(), TokenError> {
        if self.key_epoch != key.epoch {
            return Err(TokenError::EpochMismatch {
                expected: key.epoch,
                found: self.key_epoch,
            });
        }
        key.key
            .verify(&self.body_bytes(), &self.signature)
            .map_err(|_| TokenError::SignatureInvalid)?;
        if self.expires_at.checked_sub(self.issued_at) != Some(TOKEN_LIFETIME_SECS) {
            return Err(TokenError::SignatureInvalid);
        }
        Ok(())
    }

    /// Inclusive: a token is still valid at `now == expires_at`.
    pub fn is_live(&self, now: u64) -> bool {
        now <= self.expires_at
    }
}
