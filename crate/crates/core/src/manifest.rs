//! The partnership manifest: a root-signed registry binding each app to its
//! access tier and key-wrap key, verified on every gateway boot.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encoding::{b64, canonical_json};
use crate::keys::{AppPublicKey, KeyError, PublicSignerKey, SignerKey};
use crate::schema::AccessTier;

/// Longest accepted app identifier, in bytes. Bounded so that the worst-case
/// fulfillment envelope stays under its size limit.
pub const MAX_APP_ID_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProvisionError {
    #[error("manifest must list at least one app")]
    NoEntries,
    #[error("duplicate appId `{0}`")]
    DuplicateAppId(String),
    #[error("appId `{0}` must be 1..={MAX_APP_ID_LEN} bytes of printable ASCII")]
    InvalidAppId(String),
    #[error("app `{app_id}` has an invalid public key: {source}")]
    InvalidAppKey { app_id: String, source: KeyError },
    #[error("version {version} does not exceed previously issued version {last}")]
    NonIncreasingVersion { version: u64, last: u64 },
}

#[derive(Debug, Error)]
pub enum BootError {
    #[error("partnership manifest not found at {0}")]
    ManifestMissing(String),
    #[error("partnership manifest unreadable and no verified copy is available: {0}")]
    ManifestInvalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("app `{0}` is not registered in the partnership manifest")]
pub struct UnknownApp(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ManifestEntry {
    pub app_id: String,
    pub tier: AccessTier,
    /// Base64 X25519 public key the fulfillment envelope is wrapped to.
    pub app_public_key: String,
    /// Hex SHA-256 of the app's signing certificate.
    pub cert_fingerprint: String,
}

impl ManifestEntry {
    pub fn new(
        app_id: impl Into<String>,
        tier: AccessTier,
        key: AppPublicKey,
        certificate: &[u8],
    ) -> Self {
        ManifestEntry {
            app_id: app_id.into(),
            tier,
            app_public_key: key.to_b64(),
            cert_fingerprint: cert_fingerprint(certificate),
        }
    }

    pub fn public_key(&self) -> Result<AppPublicKey, KeyError> {
        AppPublicKey::from_b64(&self.app_public_key)
    }
}

pub fn cert_fingerprint(certificate: &[u8]) -> String {
    hex::encode(Sha256::digest(certificate))
}

pub fn valid_app_id(app_id: &str) -> bool {
    (1..=MAX_APP_ID_LEN).contains(&app_id.len()) && app_id.bytes().all(|b| b.is_ascii_graphic())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct PartnershipManifest {
    pub entries: Vec<ManifestEntry>,
    pub version: u64,
    pub issued_at: u64,
    #[serde(with = "b64")]
    pub root_signature: Vec<u8>,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct SignedBody<'a> {
    entries: &'a [ManifestEntry],
    version: u64,
    issued_at: u64,
}

impl PartnershipManifest {
    /// Bytes covered by the root signature.
    pub fn signed_bytes(&self) -> Vec<u8> {
        canonical_json(&SignedBody {
            entries: &self.entries,
            version: self.version,
            issued_at: self.issued_at,
        })
        .expect("manifest body serializes")
    }

    /// The on-disk form: canonical JSON including the signature.
    pub fn to_canonical_bytes(&self) -> Vec<u8> {
        canonical_json(self).expect("manifest serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> serde_json::Result<Self> {
        serde_json::from_slice(bytes)
    }

    pub fn entry(&self, app_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.app_id == app_id)
    }

    pub fn verify_signature(&self, root: &PublicSignerKey) -> bool {
        root.verify(&self.signed_bytes(), &self.root_signature)
            .is_ok()
    }
}

/// Signs a manifest. `last_issued` is the highest version this issuer has
/// already published, if any.
pub fn provision_manifest(
    entries: Vec<ManifestEntry>,
    version: u64,
    issued_at: u64,
    root_key: &SignerKey,
    last_issued: Option<u64>,
) -> Result<PartnershipManifest, ProvisionError> {
    if entries.is_empty() {
        return Err(ProvisionError::NoEntries);
    }
    if let Some(last) = last_issued {
        if version <= last {
            return Err(ProvisionError::NonIncreasingVersion { version, last });
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for e in &entries {
        if !valid_app_id(&e.app_id) {
            return Err(ProvisionError::InvalidAppId(e.app_id.clone()));
        }
        if !seen.insert(e.app_id.as_str()) {
            return Err(ProvisionError::DuplicateAppId(e.app_id.clone()));
        }
        e.public_key()
            .map_err(|source| ProvisionError::InvalidAppKey {
                app_id: e.app_id.clone(),
                source,
            })?;
    }
    let mut manifest = PartnershipManifest {
        entries,
        version,
        issued_at,
        root_signature: Vec::new(),
    };
    manifest.root_signature = root_key.sign(&manifest.signed_bytes()).to_vec();
    Ok(manifest)
}

/// Certification authority that remembers the last version it signed.
#[derive(Debug, Clone)]
pub struct ManifestIssuer {
    root: SignerKey,
    last_version: Option<u64>,
}

impl ManifestIssuer {
    pub fn new(root: SignerKey, last_version: Option<u64>) -> Self {
        ManifestIssuer { root, last_version }
    }

    pub fn root_public(&self) -> PublicSignerKey {
        self.root.public()
    }

    pub fn root_key(&self) -> &SignerKey {
        &self.root
    }

    pub fn last_version(&self) -> Option<u64> {
        self.last_version
    }

    pub fn provision(
        &mut self,
        entries: Vec<ManifestEntry>,
        version: u64,
        issued_at: u64,
    ) -> Result<PartnershipManifest, ProvisionError> {
        let m = provision_manifest(entries, version, issued_at, &self.root, self.last_version)?;
        self.last_version = Some(version);
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrustMode {
    Verified,
    Degraded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DegradeReason {
    /// Root signature missing, truncated or not matching the body.
    BadSignature,
    /// The file parsed but is not byte-identical to its canonical form.
    NonCanonical,
    /// The file did not parse; lookups fall back to the last verified copy.
    Unparseable,
    /// Signed, but older than a manifest this gateway already verified.
    Rollback { presented: u64, known: u64 },
}

/// Result of boot-time manifest verification. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrustState {
    pub mode: TrustMode,
    pub manifest: PartnershipManifest,
    pub reason: Option<DegradeReason>,
}

impl TrustState {
    fn degraded(manifest: PartnershipManifest, reason: DegradeReason) -> Self {
        TrustState {
            mode: TrustMode::Degraded,
            manifest,
            reason: Some(reason),
        }
    }

    pub fn is_verified(&self) -> bool {
        self.mode == TrustMode::Verified
    }

    pub fn entry(&self, app_id: &str) -> Option<&ManifestEntry> {
        self.manifest.entry(app_id)
    }

    /// Registered tier in verified mode; Standard for every app once degraded.
    pub fn lookup_tier(&self, app_id: &str) -> Result<AccessTier, UnknownApp> {
        let entry = self
            .entry(app_id)
            .ok_or_else(|| UnknownApp(app_id.to_owned()))?;
        Ok(match self.mode {
            TrustMode::Verified => entry.tier,
            TrustMode::Degraded => AccessTier::Standard,
        })
    }
}

/// Checks the root signature of an already-parsed manifest.
pub fn verify_at_boot(manifest: PartnershipManifest, root: &PublicSignerKey) -> TrustState {
    if manifest.verify_signature(root) {
        TrustState {
            mode: TrustMode::Verified,
            manifest,
            reason: None,
        }
    } else {
        TrustState::degraded(manifest, DegradeReason::BadSignature)
    }
}

/// Verifies the manifest file bytes exactly as read from protected storage.
///
/// Any deviation from the signed canonical encoding degrades the gateway. If
/// the bytes do not even parse, the last verified manifest (if the secure
/// store has one) backs app and key lookups; without one the boot fails.
pub fn verify_manifest_bytes(
    bytes: &[u8],
    root: &PublicSignerKey,
    last_known_good: Option<&PartnershipManifest>,
) -> Result<TrustState, BootError> {
    let manifest = match PartnershipManifest::from_bytes(bytes) {
        Ok(m) => m,
        Err(e) => {
            return match last_known_good {
                Some(good) => Ok(TrustState::degraded(
                    good.clone(),
                    DegradeReason::Unparseable,
                )),
                None => Err(BootError::ManifestInvalid(e.to_string())),
            }
        }
    };
    if manifest.to_canonical_bytes() != bytes {
        return Ok(TrustState::degraded(manifest, DegradeReason::NonCanonical));
    }
    let state = verify_at_boot(manifest, root);
    if !state.is_verified() {
        return Ok(state);
    }
    match last_known_good {
        Some(good) if good.version > state.manifest.version => {
            let presented = state.manifest.version;
            Ok(TrustState::degraded(
                state.manifest,
                DegradeReason::Rollback {
                    presented,
                    known: good.version,
                },
            ))
        }
        _ => Ok(state),
    }
}
