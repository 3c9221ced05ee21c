//! Wire message types. Every frame body is one of these, tagged by
//! `messageType`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::envelope::FulfillmentEnvelope;
use crate::error::ErrorCode;
use crate::gateway::{ConsentPrompt, ConsentValue};
use crate::schema::{RequestContext, ScopeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DecisionValue {
    Approved,
    Denied,
}

impl From<DecisionValue> for ConsentValue {
    fn from(v: DecisionValue) -> Self {
        match v {
            DecisionValue::Approved => ConsentValue::Approved,
            DecisionValue::Denied => ConsentValue::Denied,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ConsentEvent {
    pub transaction_id: String,
    pub app_id: String,
    pub request_context: RequestContext,
    pub truncated_scopes: ScopeSet,
    pub deadline: u64,
}

impl From<&ConsentPrompt> for ConsentEvent {
    fn from(p: &ConsentPrompt) -> Self {
        ConsentEvent {
            transaction_id: p.transaction_id.clone(),
            app_id: p.app_id.clone(),
            request_context: p.context,
            truncated_scopes: p.truncated_scopes,
            deadline: p.deadline,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct WireError {
    pub code: u16,
    pub name: String,
    pub transaction_id: Option<String>,
}

impl WireError {
    pub fn new(code: ErrorCode, transaction_id: Option<String>) -> Self {
        WireError {
            code: code.code(),
            name: code.name().to_owned(),
            transaction_id,
        }
    }

    pub fn error_code(&self) -> Option<ErrorCode> {
        ErrorCode::from_code(self.code)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "messageType")]
pub enum Message {
    /// Scope names stay strings here so an unknown name can be answered
    /// with a scope violation carrying the transaction id.
    #[serde(rename = "identity.request", rename_all = "camelCase")]
    IdentityRequest {
        app_id: String,
        request_context: RequestContext,
        requested_scopes: Vec<String>,
        transaction_id: String,
    },
    #[serde(rename = "identity.fulfillment", rename_all = "camelCase")]
    IdentityFulfillment {
        transaction_id: String,
        envelope: Option<FulfillmentEnvelope>,
    },
    #[serde(rename = "error")]
    Error(WireError),

    #[serde(rename = "gateway.key.request")]
    GatewayKeyRequest {},
    #[serde(rename = "gateway.key", rename_all = "camelCase")]
    GatewayKey { key_epoch: u64, public_key: String },

    #[serde(rename = "operator.attach")]
    OperatorAttach { secret: String },
    #[serde(rename = "operator.attached")]
    OperatorAttached {},
    #[serde(rename = "consent.event")]
    ConsentEvent(ConsentEvent),
    #[serde(rename = "consent.decision", rename_all = "camelCase")]
    ConsentDecision {
        transaction_id: String,
        value: DecisionValue,
        decided_scopes: ScopeSet,
    },
    /// Sent to the operator once a prompted transaction finishes.
    #[serde(rename = "consent.outcome", rename_all = "camelCase")]
    ConsentOutcome {
        transaction_id: String,
        outcome: String,
    },
    #[serde(rename = "operator.revoke", rename_all = "camelCase")]
    Revoke { app_id: String },
    #[serde(rename = "operator.reconsent", rename_all = "camelCase")]
    ReConsent { app_id: String },
    #[serde(rename = "operator.purge")]
    Purge {},
    #[serde(rename = "operator.rotateKeys")]
    RotateKeys {},
    #[serde(rename = "operator.setProfile")]
    SetProfile { profile: BTreeMap<String, String> },
    #[serde(rename = "operator.ack")]
    Ack { action: String },
    #[serde(rename = "ledger.export")]
    LedgerExport {},
    #[serde(rename = "ledger.data")]
    LedgerData { ndjson: String },
    #[serde(rename = "ledger.verify")]
    LedgerVerify {},
    #[serde(rename = "ledger.status")]
    LedgerStatus { valid: bool, length: usize },
}

impl Message {
    pub fn error(code: ErrorCode, transaction_id: Option<String>) -> Message {
        Message::Error(WireError::new(code, transaction_id))
    }

    /// Messages only the authenticated operator may send.
    pub fn is_operator_only(&self) -> bool {
        matches!(
            self,
            Message::ConsentDecision { .. }
                | Message::ConsentEvent(_)
                | Message::ConsentOutcome { .. }
                | Message::Revoke { .. }
                | Message::ReConsent { .. }
                | Message::Purge {}
                | Message::RotateKeys {}
                | Message::SetProfile { .. }
                | Message::LedgerExport {}
                | Message::LedgerVerify {}
        )
    }
}
