//! Platform Identity Manager: the PII vault.
//!
//! Holds the user profile, per-app nonce counters, revocations and the audit
//! ledger. Drawers open only for a valid scope token. Every mutation is
//! persisted before the call returns when the vault is file-backed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::rngs::OsRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use zeroize::Zeroize;

use crate::envelope::Payload;
use crate::error::ErrorCode;
use crate::keys::EpochPublicKey;
use crate::ledger::{
    verify_anchored, AuditEntry, AuditRecord, Ledger, LedgerHead, Outcome, SYSTEM_APP_ID,
};
use crate::schema::{DrawerCategory, PiiField, RequestContext, ScopeSet, MAX_VALUE_LEN};
use crate::storage::{write_private, StorageError, StorageKey};
use crate::token::{ScopeToken, TokenError};

#[derive(Debug, Error)]
pub enum PimError {
    #[error("token expired at {expires_at}, now {now}")]
    TokenExpired { expires_at: u64, now: u64 },
    #[error("nonce {nonce} already consumed (last consumed {last})")]
    ReplayDetected { nonce: u64, last: u64 },
    #[error("authorization for `{0}` has been revoked")]
    AuthorizationRevoked(String),
    #[error("token rejected: {0}")]
    TokenInvalid(#[from] TokenError),
    #[error("profile value for `{field}` is {len} bytes; the cap is {MAX_VALUE_LEN}")]
    ValueTooLong { field: PiiField, len: usize },
    #[error(transparent)]
    Storage(#[from] StorageError),
}

impl PimError {
    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            PimError::TokenExpired { .. } => Some(ErrorCode::TokenExpired),
            PimError::ReplayDetected { .. } => Some(ErrorCode::ReplayDetected),
            PimError::AuthorizationRevoked(_) => Some(ErrorCode::AuthorizationRevoked),
            PimError::TokenInvalid(_) => Some(ErrorCode::TokenInvalid),
            PimError::ValueTooLong { .. } | PimError::Storage(_) => None,
        }
    }
}

/// The user's PII, partitioned into drawers by field.
#[derive(Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserProfile {
    values: BTreeMap<PiiField, String>,
}

impl UserProfile {
    pub fn new() -> Self {
        UserProfile::default()
    }

    pub fn set(&mut self, field: PiiField, value: impl Into<String>) -> Result<(), PimError> {
        let value = value.into();
        if value.len() > MAX_VALUE_LEN {
            return Err(PimError::ValueTooLong {
                field,
                len: value.len(),
            });
        }
        if let Some(mut old) = self.values.insert(field, value) {
            old.zeroize();
        }
        Ok(())
    }

    pub fn get(&self, field: PiiField) -> Option<&str> {
        self.values.get(&field).map(String::as_str)
    }

    pub fn fields(&self) -> ScopeSet {
        self.values.keys().copied().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values held in one drawer.
    pub fn drawer(&self, drawer: DrawerCategory) -> impl Iterator<Item = (PiiField, &str)> {
        self.values
            .iter()
            .filter(move |(f, _)| f.drawer() == drawer)
            .map(|(f, v)| (*f, v.as_str()))
    }

    /// All values, for tests that scan output for leaks.
    pub fn values(&self) -> impl Iterator<Item = &str> {
        self.values.values().map(String::as_str)
    }

    pub fn clear(&mut self) {
        for v in self.values.values_mut() {
            v.zeroize();
        }
        self.values.clear();
    }
}

impl std::fmt::Debug for UserProfile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "UserProfile{}", self.fields())
    }
}

impl Drop for UserProfile {
    fn drop(&mut self) {
        self.clear();
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RevocationRecord {
    pub app_id: String,
    pub revoked_at: u64,
    pub active: bool,
}

/// Request metadata the PIM records alongside an extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransactionInfo {
    pub context: RequestContext,
    pub requested: ScopeSet,
}

#[derive(Debug)]
pub struct Extraction {
    pub payload: Payload,
    /// Authorized fields the profile had no value for.
    pub absent: ScopeSet,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct VaultState {
    profile: UserProfile,
    issued_nonces: BTreeMap<String, u64>,
    consumed_nonces: BTreeMap<String, u64>,
    revocations: BTreeMap<String, RevocationRecord>,
    ledger: Ledger,
    ledger_head: Option<LedgerHead>,
}

enum Backing {
    Memory,
    File { path: PathBuf, key: StorageKey },
}

pub struct Pim {
    state: VaultState,
    backing: Backing,
}

impl Pim {
    pub fn in_memory() -> Self {
        Pim {
            state: VaultState::default(),
            backing: Backing::Memory,
        }
    }

    /// Opens the sealed vault at `path`, creating an empty one if absent.
    pub fn open(path: &Path, key: StorageKey) -> Result<Self, StorageError> {
        let state = if path.exists() {
            let sealed = fs::read(path).map_err(|source| StorageError::Io {
                path: path.to_owned(),
                source,
            })?;
            let plain = key
                .unseal(&sealed)
                .ok_or_else(|| StorageError::Corrupt(path.to_owned()))?;
            serde_json::from_slice(&plain).map_err(|_| StorageError::Corrupt(path.to_owned()))?
        } else {
            VaultState::default()
        };
        let pim = Pim {
            state,
            backing: Backing::File {
                path: path.to_owned(),
                key,
            },
        };
        pim.persist()?;
        Ok(pim)
    }

    fn persist(&self) -> Result<(), StorageError> {
        match &self.backing {
            Backing::Memory => Ok(()),
            Backing::File { path, key } => {
                let plain = zeroize::Zeroizing::new(
                    serde_json::to_vec(&self.state).expect("vault serializes"),
                );
                write_private(path, &key.seal(&plain, &mut OsRng))
            }
        }
    }

    fn append(&mut self, record: AuditRecord) -> Result<AuditEntry, StorageError> {
        let entry = self.state.ledger.append(record).clone();
        self.state.ledger_head = Some(self.state.ledger.head());
        self.persist()?;
        Ok(entry)
    }

    /// Appends an arbitrary audit record (gateway-side outcomes).
    pub fn record(&mut self, record: AuditRecord) -> Result<AuditEntry, StorageError> {
        self.append(record)
    }

    pub fn profile(&self) -> &UserProfile {
        &self.state.profile
    }

    pub fn set_profile(&mut self, profile: UserProfile) -> Result<(), StorageError> {
        self.state.profile = profile;
        self.persist()
    }

    pub fn set_value(&mut self, field: PiiField, value: &str) -> Result<(), PimError> {
        self.state.profile.set(field, value)?;
        self.persist()?;
        Ok(())
    }

    /// Allocates the next token nonce for `app_id` and persists the counter.
    pub fn next_nonce(&mut self, app_id: &str) -> Result<u64, StorageError> {
        let counter = self
            .state
            .issued_nonces
            .entry(app_id.to_owned())
            .or_insert(0);
        *counter += 1;
        let nonce = *counter;
        self.persist()?;
        Ok(nonce)
    }

    pub fn last_consumed_nonce(&self, app_id: &str) -> u64 {
        self.state.consumed_nonces.get(app_id).copied().unwrap_or(0)
    }

    pub fn is_revoked(&self, app_id: &str) -> bool {
        self.state.revocations.get(app_id).is_some_and(|r| r.active)
    }

    pub fn revocation(&self, app_id: &str) -> Option<&RevocationRecord> {
        self.state.revocations.get(app_id)
    }

    /// Validates `token` and returns exactly its authorized fields.
    ///
    /// Checks run in order: signature under the current epoch, expiry
    /// (inclusive), nonce freshness (consumed on success), revocation.
    /// Exactly one ledger entry is appended whatever the result.
    pub fn extract(
        &mut self,
        token: &ScopeToken,
        now: u64,
        epoch_key: &EpochPublicKey,
        tx: TransactionInfo,
    ) -> Result<Extraction, PimError> {
        let base = AuditRecord::new(now, token.app_id.clone(), Outcome::Granted)
            .context(tx.context)
            .requested(tx.requested)
            .authorized(token.authorized_scopes);

        let failure = self.validate(token, now, epoch_key);
        if let Err(e) = failure {
            let code = e.code().expect("validation errors carry wire codes");
            let mut rec = base;
            rec.outcome = Outcome::Error(code.code());
            self.append(rec)?;
            return Err(e);
        }

        let mut payload = Payload::new();
        let mut absent = ScopeSet::empty();
        for field in token.authorized_scopes.iter() {
            match self.state.profile.get(field) {
                Some(v) => payload
                    .insert(field, v)
                    .expect("profile values respect the cap"),
                None => {
                    absent.insert(field);
                }
            }
        }
        self.append(base.absent(absent))?;
        Ok(Extraction { payload, absent })
    }

    fn validate(
        &mut self,
        token: &ScopeToken,
        now: u64,
        epoch_key: &EpochPublicKey,
    ) -> Result<(), PimError> {
        token.verify(epoch_key)?;
        if !token.is_live(now) {
            return Err(PimError::TokenExpired {
                expires_at: token.expires_at,
                now,
            });
        }
        let last = self.last_consumed_nonce(&token.app_id);
        if token.nonce <= last {
            return Err(PimError::ReplayDetected {
                nonce: token.nonce,
                last,
            });
        }
        self.state
            .consumed_nonces
            .insert(token.app_id.clone(), token.nonce);
        if self.is_revoked(&token.app_id) {
            return Err(PimError::AuthorizationRevoked(token.app_id.clone()));
        }
        Ok(())
    }

    pub fn revoke(&mut self, app_id: &str, now: u64) -> Result<RevocationRecord, StorageError> {
        let record = RevocationRecord {
            app_id: app_id.to_owned(),
            revoked_at: now,
            active: true,
        };
        self.state
            .revocations
            .insert(app_id.to_owned(), record.clone());
        self.append(AuditRecord::new(now, app_id, Outcome::Revoked))?;
        Ok(record)
    }

    /// Clears an active revocation; the next request runs the full consent loop.
    pub fn re_consent(&mut self, app_id: &str, now: u64) -> Result<(), StorageError> {
        if let Some(r) = self.state.revocations.get_mut(app_id) {
            r.active = false;
        }
        self.append(AuditRecord::new(now, app_id, Outcome::ReConsented))?;
        Ok(())
    }

    /// Erases every drawer. The ledger holds no values and is kept intact.
    pub fn purge(&mut self, now: u64) -> Result<(), StorageError> {
        let fields = self.state.profile.fields();
        self.state.profile.clear();
        self.append(AuditRecord::new(now, SYSTEM_APP_ID, Outcome::Purged).authorized(fields))?;
        Ok(())
    }

    pub fn ledger(&self) -> &Ledger {
        &self.state.ledger
    }

    /// Chain check plus agreement with the sealed head record.
    pub fn verify_ledger(&self) -> bool {
        let head = self
            .state
            .ledger_head
            .unwrap_or_else(|| Ledger::new().head());
        verify_anchored(self.state.ledger.entries(), &head)
    }
}
