//! The identity-sharing API over a local stream socket.

use std::path::PathBuf;

pub mod client;
pub mod codec;
pub mod message;
pub mod service;

pub use client::{AppClient, ClientError, OperatorClient};
pub use codec::{decode, encode, CodecError, MAX_FRAME};
pub use message::{ConsentEvent, DecisionValue, Message, WireError};
pub use service::{secret_path_for, ConsentMode, ServeError, Service, ServiceHandle};

/// Overrides the default socket path.
pub const SOCKET_ENV: &str = "UDSS_SOCKET";

/// `$UDSS_SOCKET`, else `udss.sock` in the temp directory.
pub fn default_socket_path() -> PathBuf {
    std::env::var_os(SOCKET_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("udss.sock"))
}
