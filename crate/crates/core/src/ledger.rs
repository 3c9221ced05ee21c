//! Hash-chained, append-only audit ledger.
//!
//! Each entry stores the hash of its predecessor (32 zero bytes for the
//! first) and its own SHA-256 over the canonical JSON of every other field.
//! Entries carry field names only, never values.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encoding::{canonical_json, hex32};
use crate::schema::{RequestContext, ScopeSet};

pub const GENESIS_HASH: [u8; 32] = [0u8; 32];

/// App id recorded for events that concern the whole device.
pub const SYSTEM_APP_ID: &str = "*";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    Granted,
    Denied,
    Revoked,
    ReConsented,
    Purged,
    ManifestDegraded,
    Error(u16),
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Granted => f.write_str("GRANTED"),
            Outcome::Denied => f.write_str("DENIED"),
            Outcome::Revoked => f.write_str("REVOKED"),
            Outcome::ReConsented => f.write_str("RECONSENTED"),
            Outcome::Purged => f.write_str("PURGED"),
            Outcome::ManifestDegraded => f.write_str("MANIFEST_DEGRADED"),
            Outcome::Error(code) => write!(f, "ERROR_{code}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown ledger outcome `{0}`")]
pub struct BadOutcome(String);

impl FromStr for Outcome {
    type Err = BadOutcome;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "GRANTED" => Outcome::Granted,
            "DENIED" => Outcome::Denied,
            "REVOKED" => Outcome::Revoked,
            "RECONSENTED" => Outcome::ReConsented,
            "PURGED" => Outcome::Purged,
            "MANIFEST_DEGRADED" => Outcome::ManifestDegraded,
            other => other
                .strip_prefix("ERROR_")
                .and_then(|c| c.parse().ok())
                .map(Outcome::Error)
                .ok_or_else(|| BadOutcome(other.to_owned()))?,
        })
    }
}

impl Serialize for Outcome {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Outcome {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = std::borrow::Cow::<'de, str>::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// What the caller supplies when appending; sequence and hashes are derived.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditRecord {
    pub timestamp: u64,
    pub app_id: String,
    pub context: Option<RequestContext>,
    pub requested_scopes: ScopeSet,
    pub authorized_scopes: ScopeSet,
    /// Authorized fields the profile had no value for.
    pub absent_scopes: ScopeSet,
    pub outcome: Outcome,
}

impl AuditRecord {
    pub fn new(timestamp: u64, app_id: impl Into<String>, outcome: Outcome) -> Self {
        AuditRecord {
            timestamp,
            app_id: app_id.into(),
            context: None,
            requested_scopes: ScopeSet::empty(),
            authorized_scopes: ScopeSet::empty(),
            absent_scopes: ScopeSet::empty(),
            outcome,
        }
    }

    pub fn context(mut self, ctx: RequestContext) -> Self {
        self.context = Some(ctx);
        self
    }

    pub fn requested(mut self, scopes: ScopeSet) -> Self {
        self.requested_scopes = scopes;
        self
    }

    pub fn authorized(mut self, scopes: ScopeSet) -> Self {
        self.authorized_scopes = scopes;
        self
    }

    pub fn absent(mut self, scopes: ScopeSet) -> Self {
        self.absent_scopes = scopes;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct AuditEntry {
    pub sequence: u64,
    pub timestamp: u64,
    pub app_id: String,
    pub context: Option<RequestContext>,
    pub requested_scopes: ScopeSet,
    pub authorized_scopes: ScopeSet,
    pub absent_scopes: ScopeSet,
    pub outcome: Outcome,
    #[serde(with = "hex32")]
    pub prev_hash: [u8; 32],
    #[serde(with = "hex32")]
    pub entry_hash: [u8; 32],
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct HashedFields<'a> {
    sequence: u64,
    timestamp: u64,
    app_id: &'a str,
    context: Option<RequestContext>,
    requested_scopes: ScopeSet,
    authorized_scopes: ScopeSet,
    absent_scopes: ScopeSet,
    outcome: Outcome,
    #[serde(with = "hex32")]
    prev_hash: &'a [u8; 32],
}

impl AuditEntry {
    /// Recomputes the hash from every field except `entry_hash`.
    pub fn compute_hash(&self) -> [u8; 32] {
        let bytes = canonical_json(&HashedFields {
            sequence: self.sequence,
            timestamp: self.timestamp,
            app_id: &self.app_id,
            context: self.context,
            requested_scopes: self.requested_scopes,
            authorized_scopes: self.authorized_scopes,
            absent_scopes: self.absent_scopes,
            outcome: self.outcome,
            prev_hash: &self.prev_hash,
        })
        .expect("audit entry serializes");
        Sha256::digest(bytes).into()
    }

    pub fn to_canonical_line(&self) -> String {
        String::from_utf8(canonical_json(self).expect("audit entry serializes"))
            .expect("JSON is UTF-8")
    }
}

/// Length and last hash of a chain, kept alongside it so tail truncation is
/// detectable too.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LedgerHead {
    pub length: u64,
    #[serde(with = "hex32")]
    pub hash: [u8; 32],
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ledger {
    entries: Vec<AuditEntry>,
}

impl Ledger {
    pub fn new() -> Self {
        Ledger::default()
    }

    pub fn append(&mut self, record: AuditRecord) -> &AuditEntry {
        let prev_hash = self.head().hash;
        let mut entry = AuditEntry {
            sequence: self.entries.len() as u64,
            timestamp: record.timestamp,
            app_id: record.app_id,
            context: record.context,
            requested_scopes: record.requested_scopes,
            authorized_scopes: record.authorized_scopes,
            absent_scopes: record.absent_scopes,
            outcome: record.outcome,
            prev_hash,
            entry_hash: GENESIS_HASH,
        };
        entry.entry_hash = entry.compute_hash();
        self.entries.push(entry);
        self.entries.last().expect("just pushed")
    }

    pub fn entries(&self) -> &[AuditEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn head(&self) -> LedgerHead {
        LedgerHead {
            length: self.entries.len() as u64,
            hash: self
                .entries
                .last()
                .map(|e| e.entry_hash)
                .unwrap_or(GENESIS_HASH),
        }
    }

    pub fn verify(&self) -> bool {
        verify_chain(&self.entries)
    }

    pub fn export(&self) -> String {
        export_ndjson(&self.entries)
    }
}

/// True iff every entry's hash recomputes, every `prev_hash` links to its
/// predecessor and sequence numbers run 0, 1, 2, ...
pub fn verify_chain(entries: &[AuditEntry]) -> bool {
    let mut prev = GENESIS_HASH;
    for (i, e) in entries.iter().enumerate() {
        if e.sequence != i as u64 || e.prev_hash != prev || e.compute_hash() != e.entry_hash {
            return false;
        }
        prev = e.entry_hash;
    }
    true
}

/// [`verify_chain`] plus a check against a separately held head.
pub fn verify_anchored(entries: &[AuditEntry], head: &LedgerHead) -> bool {
    let tail = entries.last().map(|e| e.entry_hash).unwrap_or(GENESIS_HASH);
    verify_chain(entries) && entries.len() as u64 == head.length && tail == head.hash
}

/// Newline-delimited canonical JSON, one entry per line.
pub fn export_ndjson(entries: &[AuditEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&e.to_canonical_line());
        out.push('\n');
    }
    out
}

pub fn parse_ndjson(text: &str) -> serde_json::Result<Vec<AuditEntry>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
