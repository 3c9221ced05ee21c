//! Blocking clients for both channels.

use std::collections::VecDeque;
use std::io::{self, BufReader};
use std::os::unix::net::UnixStream;
use std::path::Path;
use std::time::Duration;

use thiserror::Error;

use super::codec::{decode_body, read_frame, write_message, CodecError};
use super::message::{ConsentEvent, DecisionValue, Message, WireError};
use crate::keys::{EpochPublicKey, PublicSignerKey};
use crate::schema::{RequestContext, ScopeSet};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("service closed the connection")]
    Closed,
    #[error("service answered {} {}", .0.code, .0.name)]
    Rejected(WireError),
    #[error("unexpected reply: {0:?}")]
    Unexpected(Box<Message>),
}

struct Conn {
    reader: BufReader<UnixStream>,
    writer: UnixStream,
}

impl Conn {
    fn connect(path: &Path) -> io::Result<Conn> {
        let stream = UnixStream::connect(path)?;
        Ok(Conn {
            writer: stream.try_clone()?,
            reader: BufReader::new(stream),
        })
    }

    fn send(&mut self, msg: &Message) -> Result<(), ClientError> {
        write_message(&mut self.writer, msg)?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Message, ClientError> {
        let body = read_frame(&mut self.reader)?.ok_or(ClientError::Closed)?;
        Ok(decode_body(&body)?)
    }
}

fn epoch_key(msg: Message) -> Result<EpochPublicKey, ClientError> {
    match msg {
        Message::GatewayKey {
            key_epoch,
            public_key,
        } => Ok(EpochPublicKey {
            epoch: key_epoch,
            key: PublicSignerKey::from_b64(&public_key).map_err(|_| {
                ClientError::Unexpected(Box::new(Message::GatewayKey {
                    key_epoch,
                    public_key,
                }))
            })?,
        }),
        Message::Error(e) => Err(ClientError::Rejected(e)),
        other => Err(ClientError::Unexpected(Box::new(other))),
    }
}

/// An app's connection: one request, one reply.
pub struct AppClient {
    conn: Conn,
}

impl AppClient {
    pub fn connect(socket: &Path) -> io::Result<AppClient> {
        Ok(AppClient {
            conn: Conn::connect(socket)?,
        })
    }

    pub fn call(&mut self, msg: &Message) -> Result<Message, ClientError> {
        self.conn.send(msg)?;
        self.conn.recv()
    }

    /// Sends raw bytes as-is and reads one reply, if the service sends one.
    pub fn call_raw(&mut self, bytes: &[u8]) -> Result<Message, ClientError> {
        use std::io::Write;
        self.conn.writer.write_all(bytes)?;
        self.conn.recv()
    }

    pub fn request(
        &mut self,
        app_id: &str,
        context: RequestContext,
        scopes: &[&str],
        transaction_id: &str,
    ) -> Result<Message, ClientError> {
        self.call(&Message::IdentityRequest {
            app_id: app_id.to_owned(),
            request_context: context,
            requested_scopes: scopes.iter().map(|s| (*s).to_owned()).collect(),
            transaction_id: transaction_id.to_owned(),
        })
    }

    pub fn gateway_key(&mut self) -> Result<EpochPublicKey, ClientError> {
        epoch_key(self.call(&Message::GatewayKeyRequest {})?)
    }
}

/// The consent surface. Consent events and outcomes can arrive between a
/// command and its reply; they are queued for [`OperatorClient::next_event`].
pub struct OperatorClient {
    conn: Conn,
    events: VecDeque<Message>,
}

fn is_event(m: &Message) -> bool {
    matches!(m, Message::ConsentEvent(_) | Message::ConsentOutcome { .. })
}

impl OperatorClient {
    pub fn attach(socket: &Path, secret: &str) -> Result<OperatorClient, ClientError> {
        let mut conn = Conn::connect(socket)?;
        conn.send(&Message::OperatorAttach {
            secret: secret.trim().to_owned(),
        })?;
        match conn.recv()? {
            Message::OperatorAttached {} => Ok(OperatorClient {
                conn,
                events: VecDeque::new(),
            }),
            Message::Error(e) => Err(ClientError::Rejected(e)),
            other => Err(ClientError::Unexpected(Box::new(other))),
        }
    }

    /// Sends a command and returns its reply, queueing interleaved events.
    pub fn call(&mut self, msg: &Message) -> Result<Message, ClientError> {
        self.conn.send(msg)?;
        loop {
            let m = self.conn.recv()?;
            if is_event(&m) {
                self.events.push_back(m);
            } else {
                return Ok(m);
            }
        }
    }

    /// Next consent event or outcome, waiting up to `timeout`.
    pub fn next_event(&mut self, timeout: Duration) -> Result<Option<Message>, ClientError> {
        if let Some(m) = self.events.pop_front() {
            return Ok(Some(m));
        }
        self.conn.reader.get_ref().set_read_timeout(Some(timeout))?;
        let r = self.conn.recv();
        self.conn.reader.get_ref().set_read_timeout(None)?;
        match r {
            Ok(m) => Ok(Some(m)),
            Err(ClientError::Codec(CodecError::Io(e)))
                if matches!(
                    e.kind(),
                    io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                ) =>
            {
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    /// Waits for the next prompt, skipping outcomes.
    pub fn next_prompt(&mut self, timeout: Duration) -> Result<Option<ConsentEvent>, ClientError> {
        let deadline = std::time::Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(std::time::Instant::now());
            if left.is_zero() {
                return Ok(None);
            }
            match self.next_event(left)? {
                Some(Message::ConsentEvent(e)) => return Ok(Some(e)),
                Some(_) => continue,
                None => return Ok(None),
            }
        }
    }

    fn expect_ack(&mut self, msg: &Message) -> Result<(), ClientError> {
        match self.call(msg)? {
            Message::Ack { .. } => Ok(()),
            Message::Error(e) => Err(ClientError::Rejected(e)),
            other => Err(ClientError::Unexpected(Box::new(other))),
        }
    }

    pub fn decide(
        &mut self,
        transaction_id: &str,
        value: DecisionValue,
        decided_scopes: ScopeSet,
    ) -> Result<(), ClientError> {
        self.expect_ack(&Message::ConsentDecision {
            transaction_id: transaction_id.to_owned(),
            value,
            decided_scopes,
        })
    }

    pub fn revoke(&mut self, app_id: &str) -> Result<(), ClientError> {
        self.expect_ack(&Message::Revoke {
            app_id: app_id.to_owned(),
        })
    }

    pub fn re_consent(&mut self, app_id: &str) -> Result<(), ClientError> {
        self.expect_ack(&Message::ReConsent {
            app_id: app_id.to_owned(),
        })
    }

    pub fn purge(&mut self) -> Result<(), ClientError> {
        self.expect_ack(&Message::Purge {})
    }

    pub fn set_profile(
        &mut self,
        profile: std::collections::BTreeMap<String, String>,
    ) -> Result<(), ClientError> {
        self.expect_ack(&Message::SetProfile { profile })
    }

    pub fn rotate_keys(&mut self) -> Result<EpochPublicKey, ClientError> {
        let reply = self.call(&Message::RotateKeys {})?;
        epoch_key(reply)
    }

    pub fn export_ledger(&mut self) -> Result<String, ClientError> {
        match self.call(&Message::LedgerExport {})? {
            Message::LedgerData { ndjson } => Ok(ndjson),
            Message::Error(e) => Err(ClientError::Rejected(e)),
            other => Err(ClientError::Unexpected(Box::new(other))),
        }
    }

    /// `(valid, length)` as computed by the service.
    pub fn verify_ledger(&mut self) -> Result<(bool, usize), ClientError> {
        match self.call(&Message::LedgerVerify {})? {
            Message::LedgerStatus { valid, length } => Ok((valid, length)),
            Message::Error(e) => Err(ClientError::Rejected(e)),
            other => Err(ClientError::Unexpected(Box::new(other))),
        }
    }
}
