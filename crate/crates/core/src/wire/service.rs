//! Local socket service: the app channel and the authenticated operator
//! channel.
//!
//! Any connection may send `operator.attach`; a connection that presents the
//! boot secret becomes the single consent surface until it disconnects.
//! Consent events only ever go to that connection.

use std::collections::HashMap;
use std::io::{self, BufReader};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use rand::rngs::OsRng;
use rand::RngCore;
use thiserror::Error;

use super::codec::{decode_body, encode, read_frame, write_message, CodecError};
use super::message::{ConsentEvent, Message};
use crate::error::ErrorCode;
use crate::gateway::{
    ConsentAgent, ConsentDecision, ConsentPrompt, Gateway, GatewayError, IdentityRequest,
};
use crate::ledger::Outcome;
use crate::pim::UserProfile;
use crate::schema::{PiiField, ScopeSet};
use crate::storage::write_private;

/// Where consent decisions come from.
#[derive(Clone)]
pub enum ConsentMode {
    /// The attached operator decides; no operator means denial.
    Operator,
    /// A fixed in-process agent (harness runs).
    Scripted(Arc<dyn ConsentAgent + Send + Sync>),
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("socket {0} is already served by another process")]
    InUse(PathBuf),
    #[error("cannot bind {path}: {source}")]
    Bind { path: PathBuf, source: io::Error },
    #[error("cannot write operator secret: {0}")]
    Secret(#[from] crate::storage::StorageError),
}

/// Path of the operator secret for a socket path.
pub fn secret_path_for(socket: &Path) -> PathBuf {
    socket.with_extension("secret")
}

type Writer = Arc<Mutex<UnixStream>>;

const ACCEPT_POLL: Duration = Duration::from_millis(10);

struct OperatorSlot {
    conn_id: u64,
    writer: Writer,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

pub struct Service {
    gateway: Arc<Gateway>,
    secret: String,
    consent: ConsentMode,
    operator: Mutex<Option<OperatorSlot>>,
    pending: Mutex<HashMap<String, Sender<ConsentDecision>>>,
    /// Upper bound on how long a prompt waits in wall time.
    consent_wait: Duration,
    next_conn: AtomicU64,
}

impl Service {
    pub fn new(gateway: Arc<Gateway>, consent: ConsentMode) -> Self {
        let mut raw = [0u8; 32];
        OsRng.fill_bytes(&mut raw);
        Service {
            gateway,
            secret: hex::encode(raw),
            consent,
            operator: Mutex::new(None),
            pending: Mutex::new(HashMap::new()),
            consent_wait: Duration::from_secs(crate::gateway::CONSENT_TIMEOUT_SECS),
            next_conn: AtomicU64::new(1),
        }
    }

    pub fn with_consent_wait(mut self, wait: Duration) -> Self {
        self.consent_wait = wait;
        self
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn operator_secret(&self) -> &str {
        &self.secret
    }

    pub fn operator_attached(&self) -> bool {
        lock(&self.operator).is_some()
    }

    /// Answers one app-channel frame body with one encoded response frame.
    pub fn handle_app_frame(&self, body: &[u8]) -> Vec<u8> {
        let response = match decode_body(body) {
            Ok(Message::OperatorAttach { .. }) => Message::error(ErrorCode::OperatorRejected, None),
            Ok(msg) => self.handle_app(msg),
            Err(_) => Message::error(ErrorCode::ProtocolError, None),
        };
        encode(&response)
    }

    fn handle_app(&self, msg: Message) -> Message {
        match msg {
            Message::IdentityRequest {
                app_id,
                request_context,
                requested_scopes,
                transaction_id,
            } => self.identity_request(app_id, request_context, &requested_scopes, transaction_id),
            Message::GatewayKeyRequest {} => {
                let key = self.gateway.epoch_public();
                Message::GatewayKey {
                    key_epoch: key.epoch,
                    public_key: key.key.to_b64(),
                }
            }
            m if m.is_operator_only() => {
                log::warn!("operator message on an unauthenticated connection");
                Message::error(ErrorCode::OperatorRejected, None)
            }
            _ => Message::error(ErrorCode::ProtocolError, None),
        }
    }

    fn identity_request(
        &self,
        app_id: String,
        context: crate::schema::RequestContext,
        names: &[String],
        transaction_id: String,
    ) -> Message {
        let mut scopes = ScopeSet::empty();
        let mut bad = false;
        for name in names {
            match PiiField::from_str(name) {
                Ok(f) if !scopes.contains(f) => {
                    scopes.insert(f);
                }
                _ => bad = true,
            }
        }
        if bad {
            let code = ErrorCode::ScopeViolation;
            return match self
                .gateway
                .record_rejection(&app_id, context, scopes, code)
            {
                Ok(()) => Message::error(code, Some(transaction_id)),
                Err(e) => Message::error(e.code(), Some(transaction_id)),
            };
        }
        let req = IdentityRequest {
            app_id,
            context,
            requested_scopes: scopes,
            transaction_id,
        };
        let result = match &self.consent {
            ConsentMode::Scripted(agent) => self.gateway.handle_request(&req, agent.as_ref()),
            ConsentMode::Operator => {
                let agent = OperatorConsent {
                    service: self,
                    prompted: Mutex::new(None),
                };
                let result = self.gateway.handle_request(&req, &agent);
                if let Some(writer) = lock(&agent.prompted).take() {
                    let outcome = match &result {
                        Ok(_) => Outcome::Granted,
                        Err(GatewayError::ConsentDenied) => Outcome::Denied,
                        Err(e) => Outcome::Error(e.code().code()),
                    };
                    let _ = write_message(
                        &mut *lock(&writer),
                        &Message::ConsentOutcome {
                            transaction_id: req.transaction_id.clone(),
                            outcome: outcome.to_string(),
                        },
                    );
                }
                result
            }
        };
        match result {
            Ok(f) => Message::IdentityFulfillment {
                transaction_id: f.transaction_id,
                envelope: f.envelope,
            },
            Err(e) => Message::error(e.code(), Some(req.transaction_id)),
        }
    }

    fn handle_operator(&self, msg: Message) -> Message {
        let gw = &self.gateway;
        let ack = |action: &str, r: Result<(), GatewayError>| match r {
            Ok(()) => Message::Ack {
                action: action.to_owned(),
            },
            Err(e) => Message::error(e.code(), None),
        };
        match msg {
            Message::ConsentDecision {
                transaction_id,
                value,
                decided_scopes,
            } => match lock(&self.pending).remove(&transaction_id) {
                Some(tx) => {
                    let _ = tx.send(ConsentDecision {
                        value: value.into(),
                        decided_scopes,
                    });
                    Message::Ack {
                        action: "consent.decision".into(),
                    }
                }
                // expired, already decided, or never shown
                None => Message::error(ErrorCode::ProtocolError, Some(transaction_id)),
            },
            Message::Revoke { app_id } => ack("revoke", gw.revoke(&app_id).map(drop)),
            Message::ReConsent { app_id } => ack("reconsent", gw.re_consent(&app_id)),
            Message::Purge {} => ack("purge", gw.purge()),
            Message::RotateKeys {} => match gw.rotate_keys() {
                Ok(key) => Message::GatewayKey {
                    key_epoch: key.epoch,
                    public_key: key.key.to_b64(),
                },
                Err(e) => Message::error(e.code(), None),
            },
            Message::SetProfile { profile } => match build_profile(&profile) {
                Ok(p) => ack("setProfile", gw.set_profile(p)),
                Err(code) => Message::error(code, None),
            },
            Message::LedgerExport {} => Message::LedgerData {
                ndjson: gw.export_ledger(),
            },
            Message::LedgerVerify {} => Message::LedgerStatus {
                valid: gw.verify_ledger(),
                length: gw.ledger_len(),
            },
            Message::GatewayKeyRequest {} => self.handle_app(Message::GatewayKeyRequest {}),
            // the consent surface cannot also be a requesting app
            _ => Message::error(ErrorCode::ProtocolError, None),
        }
    }

    fn try_attach(&self, conn_id: u64, writer: &Writer, secret: &str) -> Message {
        if secret.len() != self.secret.len()
            || !secret
                .bytes()
                .zip(self.secret.bytes())
                .fold(true, |ok, (a, b)| ok & (a == b))
        {
            log::warn!("operator attach with a bad secret on connection {conn_id}");
            return Message::error(ErrorCode::OperatorRejected, None);
        }
        let mut slot = lock(&self.operator);
        if slot.is_some() {
            log::warn!("second operator attach refused on connection {conn_id}");
            return Message::error(ErrorCode::OperatorRejected, None);
        }
        *slot = Some(OperatorSlot {
            conn_id,
            writer: writer.clone(),
        });
        log::info!("operator attached on connection {conn_id}");
        Message::OperatorAttached {}
    }

    fn detach(&self, conn_id: u64) {
        let mut slot = lock(&self.operator);
        if slot.as_ref().is_some_and(|s| s.conn_id == conn_id) {
            *slot = None;
            // dropping the senders turns every open prompt into a denial
            lock(&self.pending).clear();
            log::info!("operator detached");
        }
    }

    fn serve_connection(&self, stream: UnixStream) {
        let conn_id = self.next_conn.fetch_add(1, Ordering::Relaxed);
        let writer: Writer = match stream.try_clone() {
            Ok(s) => Arc::new(Mutex::new(s)),
            Err(_) => return,
        };
        let mut reader = BufReader::new(stream);
        let mut is_operator = false;
        loop {
            let body = match read_frame(&mut reader) {
                Ok(Some(b)) => b,
                Ok(None) => break,
                Err(CodecError::Io(_)) => break,
                Err(_) => {
                    // framing is lost; answer once and hang up
                    let _ = write_message(
                        &mut *lock(&writer),
                        &Message::error(ErrorCode::ProtocolError, None),
                    );
                    break;
                }
            };
            let response = match decode_body(&body) {
                Err(_) => Message::error(ErrorCode::ProtocolError, None),
                Ok(Message::OperatorAttach { secret }) => {
                    if is_operator {
                        Message::error(ErrorCode::OperatorRejected, None)
                    } else {
                        let r = self.try_attach(conn_id, &writer, &secret);
                        is_operator = matches!(r, Message::OperatorAttached {});
                        r
                    }
                }
                Ok(msg) if is_operator => self.handle_operator(msg),
                Ok(msg) => self.handle_app(msg),
            };
            if write_message(&mut *lock(&writer), &response).is_err() {
                break;
            }
        }
        if is_operator {
            self.detach(conn_id);
        }
    }

    /// Binds `socket`, writes the operator secret next to it and serves on
    /// background threads until the handle is shut down or dropped.
    pub fn serve(self, socket: &Path) -> Result<ServiceHandle, ServeError> {
        if socket.exists() {
            if UnixStream::connect(socket).is_ok() {
                return Err(ServeError::InUse(socket.to_owned()));
            }
            let _ = std::fs::remove_file(socket);
        }
        let listener = UnixListener::bind(socket).map_err(|source| ServeError::Bind {
            path: socket.to_owned(),
            source,
        })?;
        // polled so shutdown does not depend on the socket path still existing
        listener
            .set_nonblocking(true)
            .map_err(|source| ServeError::Bind {
                path: socket.to_owned(),
                source,
            })?;
        let secret_path = secret_path_for(socket);
        write_private(&secret_path, self.secret.as_bytes())?;

        let service = Arc::new(self);
        let stop = Arc::new(AtomicBool::new(false));
        let accept = {
            let service = service.clone();
            let stop = stop.clone();
            thread::spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            if stream.set_nonblocking(false).is_err() {
                                continue;
                            }
                            let service = service.clone();
                            thread::spawn(move || service.serve_connection(stream));
                        }
                        Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                            thread::sleep(ACCEPT_POLL);
                        }
                        Err(e) => {
                            log::error!("accept failed: {e}");
                            thread::sleep(ACCEPT_POLL);
                        }
                    }
                }
            })
        };
        Ok(ServiceHandle {
            service,
            socket: socket.to_owned(),
            secret_path,
            stop,
            accept: Some(accept),
        })
    }
}

/// Routes a prompt to the attached operator and waits for its decision.
struct OperatorConsent<'a> {
    service: &'a Service,
    prompted: Mutex<Option<Writer>>,
}

impl ConsentAgent for OperatorConsent<'_> {
    fn decide(&self, prompt: &ConsentPrompt) -> ConsentDecision {
        let Some(writer) = lock(&self.service.operator)
            .as_ref()
            .map(|s| s.writer.clone())
        else {
            return ConsentDecision::deny(prompt);
        };
        let (tx, rx) = mpsc::channel();
        lock(&self.service.pending).insert(prompt.transaction_id.clone(), tx);
        let event = Message::ConsentEvent(ConsentEvent::from(prompt));
        if write_message(&mut *lock(&writer), &event).is_err() {
            lock(&self.service.pending).remove(&prompt.transaction_id);
            return ConsentDecision::deny(prompt);
        }
        *lock(&self.prompted) = Some(writer);
        let left = prompt.deadline.saturating_sub(self.service.gateway.now());
        let wait = Duration::from_secs(left).min(self.service.consent_wait);
        let decision = rx
            .recv_timeout(wait)
            .unwrap_or(ConsentDecision::deny(prompt));
        lock(&self.service.pending).remove(&prompt.transaction_id);
        decision
    }
}

fn build_profile(
    values: &std::collections::BTreeMap<String, String>,
) -> Result<UserProfile, ErrorCode> {
    let mut profile = UserProfile::new();
    for (name, value) in values {
        let field = PiiField::from_str(name).map_err(|_| ErrorCode::ScopeViolation)?;
        profile
            .set(field, value.as_str())
            .map_err(|_| ErrorCode::ProtocolError)?;
    }
    Ok(profile)
}

pub struct ServiceHandle {
    service: Arc<Service>,
    socket: PathBuf,
    secret_path: PathBuf,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn service(&self) -> &Arc<Service> {
        &self.service
    }

    pub fn socket_path(&self) -> &Path {
        &self.socket
    }

    pub fn secret_path(&self) -> &Path {
        &self.secret_path
    }

    /// Blocks until the accept loop exits.
    pub fn wait(mut self) {
        if let Some(t) = self.accept.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        if let Some(t) = self.accept.take() {
            self.stop.store(true, Ordering::SeqCst);
            let _ = t.join();
            let _ = std::fs::remove_file(&self.socket);
            let _ = std::fs::remove_file(&self.secret_path);
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.stop_now();
    }
}
