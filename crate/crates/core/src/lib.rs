//! Privacy middleware between relying apps and the user's PII vault.
//!
//! Apps name the fields they want; the gateway narrows the request to what
//! the context and the app's partnership tier allow, asks the user, and has
//! the vault seal exactly the authorized values for that app alone.

pub mod clock;
pub mod encoding;
pub mod envelope;
pub mod error;
pub mod gateway;
pub mod keys;
pub mod ledger;
pub mod manifest;
pub mod pim;
pub mod schema;
pub mod storage;
pub mod token;
pub mod wire;

pub use error::ErrorCode;
pub use gateway::{
    ApproveAll, ConsentAgent, ConsentDecision, ConsentPrompt, ConsentValue, DenyAll, Fulfillment,
    Gateway, GatewayError, IdentityRequest, StorePaths,
};
pub use schema::{AccessTier, DrawerCategory, PiiField, RequestContext, ScopeSet};
