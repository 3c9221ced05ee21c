//! Wire error codes shared by the gateway, the PIM and the wire protocol.

use std::fmt;

use serde::{Deserialize, Serialize};

/// The 40xx error namespace. 4004 is the revocation code apps already know;
/// the rest extend the same numbering and are not normative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u16", try_from = "u16")]
pub enum ErrorCode {
    ProtocolError,
    UnknownApp,
    ScopeViolation,
    ConsentDenied,
    AuthorizationRevoked,
    TokenExpired,
    ReplayDetected,
    ManifestInvalid,
    TokenInvalid,
    OperatorRejected,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 10] = [
        ErrorCode::ProtocolError,
        ErrorCode::UnknownApp,
        ErrorCode::ScopeViolation,
        ErrorCode::ConsentDenied,
        ErrorCode::AuthorizationRevoked,
        ErrorCode::TokenExpired,
        ErrorCode::ReplayDetected,
        ErrorCode::ManifestInvalid,
        ErrorCode::TokenInvalid,
        ErrorCode::OperatorRejected,
    ];

    pub fn code(self) -> u16 {
        match self {
            ErrorCode::ProtocolError => 4000,
            ErrorCode::UnknownApp => 4001,
            ErrorCode::ScopeViolation => 4002,
            ErrorCode::ConsentDenied => 4003,
            ErrorCode::AuthorizationRevoked => 4004,
            ErrorCode::TokenExpired => 4005,
            ErrorCode::ReplayDetected => 4006,
            ErrorCode::ManifestInvalid => 4007,
            ErrorCode::TokenInvalid => 4008,
            ErrorCode::OperatorRejected => 4009,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorCode::ProtocolError => "ProtocolError",
            ErrorCode::UnknownApp => "UnknownApp",
            ErrorCode::ScopeViolation => "ScopeViolation",
            ErrorCode::ConsentDenied => "ConsentDenied",
            ErrorCode::AuthorizationRevoked => "AuthorizationRevoked",
            ErrorCode::TokenExpired => "TokenExpired",
            ErrorCode::ReplayDetected => "ReplayDetected",
            ErrorCode::ManifestInvalid => "ManifestInvalid",
            ErrorCode::TokenInvalid => "TokenInvalid",
            ErrorCode::OperatorRejected => "OperatorRejected",
        }
    }

    pub fn from_code(code: u16) -> Option<ErrorCode> {
        ErrorCode::ALL.into_iter().find(|c| c.code() == code)
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.code(), self.name())
    }
}

impl From<ErrorCode> for u16 {
    fn from(c: ErrorCode) -> u16 {
        c.code()
    }
}

impl TryFrom<u16> for ErrorCode {
    type Error = String;

    fn try_from(code: u16) -> Result<Self, Self::Error> {
        ErrorCode::from_code(code).ok_or_else(|| format!("unknown error code {code}"))
    }
}
