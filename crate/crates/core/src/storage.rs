//! Simulated secure storage.
//!
//! Two files stand in for hardware-bound storage: a mode-0600 secure record
//! holding the vault key, the gateway signing epochs and the last verified
//! manifest, and the vault file itself, sealed with AES-256-GCM under that key.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use aes_gcm::aead::Aead;
use aes_gcm::{Aes256Gcm, KeyInit, Nonce};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use zeroize::Zeroizing;

use crate::encoding::{b64_decode_array, b64_encode};
use crate::keys::{KeyError, KeyRing, StoredEpoch};
use crate::manifest::PartnershipManifest;

const VAULT_MAGIC: &[u8; 8] = b"UDSSPIM1";

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("storage I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0} is corrupt or was sealed under a different key")]
    Corrupt(PathBuf),
    #[error("secure store record is invalid: {0}")]
    BadRecord(String),
    #[error(transparent)]
    Key(#[from] KeyError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StorageError + '_ {
    move |source| StorageError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Writes through a temp file and a rename, owner-only permissions.
pub fn write_private(path: &Path, bytes: &[u8]) -> Result<(), StorageError> {
    let tmp = path.with_extension("tmp");
    {
        let mut opts = fs::OpenOptions::new();
        opts.write(true).create(true).truncate(true);
        #[cfg(unix)]
        {
            use std::os::unix::fs::OpenOptionsExt;
            opts.mode(0o600);
        }
        let mut f = opts.open(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// 256-bit key for the vault file.
#[derive(Clone)]
pub struct StorageKey(Zeroizing<[u8; 32]>);

impl StorageKey {
    pub fn generate(rng: &mut dyn RngCore) -> Self {
        let mut k = Zeroizing::new([0u8; 32]);
        rng.fill_bytes(k.as_mut());
        StorageKey(k)
    }

    fn cipher(&self) -> Aes256Gcm {
        Aes256Gcm::new_from_slice(self.0.as_ref()).expect("256-bit key")
    }

    /// `magic || nonce || ciphertext+tag`
    pub fn seal(&self, plaintext: &[u8], rng: &mut dyn RngCore) -> Vec<u8> {
        let mut nonce = [0u8; 12];
        rng.fill_bytes(&mut nonce);
        let ct = self
            .cipher()
            .encrypt(
                Nonce::from_slice(&nonce),
                aes_gcm::aead::Payload {
                    msg: plaintext,
                    aad: VAULT_MAGIC,
                },
            )
            .expect("vault fits in one AES-GCM message");
        let mut out = Vec::with_capacity(8 + 12 + ct.len());
        out.extend_from_slice(VAULT_MAGIC);
        out.extend_from_slice(&nonce);
        out.extend_from_slice(&ct);
        out
    }

    pub fn unseal(&self, sealed: &[u8]) -> Option<Zeroizing<Vec<u8>>> {
        if sealed.len() < 20 || &sealed[..8] != VAULT_MAGIC {
            return None;
        }
        self.cipher()
            .decrypt(
                Nonce::from_slice(&sealed[8..20]),
                aes_gcm::aead::Payload {
                    msg: &sealed[20..],
                    aad: VAULT_MAGIC,
                },
            )
            .ok()
            .map(Zeroizing::new)
    }
}

impl std::fmt::Debug for StorageKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("StorageKey(..)")
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct SecureRecord {
    storage_key: String,
    current_epoch: StoredEpoch,
    retired_epochs: Vec<(u64, String)>,
    last_known_good: Option<PartnershipManifest>,
}

/// Process-private stand-in for TEE secure storage.
pub struct SecureStore {
    path: Option<PathBuf>,
    storage_key: StorageKey,
    keys: KeyRing,
    last_known_good: Option<PartnershipManifest>,
}

impl SecureStore {
    /// Fresh in-memory store with epoch 1 keys.
    pub fn ephemeral(rng: &mut dyn RngCore, now: u64) -> Self {
        SecureStore {
            path: None,
            storage_key: StorageKey::generate(rng),
            keys: KeyRing::provision(rng, now),
            last_known_good: None,
        }
    }

    /// Loads the record at `path`, or provisions and writes a new one if the
    /// file does not exist. A present but unreadable record is an error.
    pub fn open_or_init(
        path: &Path,
        rng: &mut dyn RngCore,
        now: u64,
    ) -> Result<Self, StorageError> {
        if !path.exists() {
            let mut store = SecureStore::ephemeral(rng, now);
            store.path = Some(path.to_owned());
            store.persist()?;
            return Ok(store);
        }
        let bytes = Zeroizing::new(fs::read(path).map_err(io_err(path))?);
        let record: SecureRecord =
            serde_json::from_slice(&bytes).map_err(|e| StorageError::BadRecord(e.to_string()))?;
        let key = b64_decode_array::<32>(&record.storage_key)
            .ok_or_else(|| StorageError::BadRecord("storage key".into()))?;
        Ok(SecureStore {
            path: Some(path.to_owned()),
            storage_key: StorageKey(Zeroizing::new(key)),
            keys: KeyRing::from_stored(&record.current_epoch, &record.retired_epochs)?,
            last_known_good: record.last_known_good,
        })
    }

    fn persist(&self) -> Result<(), StorageError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let (current_epoch, retired_epochs) = self.keys.to_stored();
        let record = SecureRecord {
            storage_key: b64_encode(self.storage_key.0.as_ref()),
            current_epoch,
            retired_epochs,
            last_known_good: self.last_known_good.clone(),
        };
        let bytes = Zeroizing::new(serde_json::to_vec_pretty(&record).expect("record serializes"));
        write_private(path, &bytes)
    }

    pub fn storage_key(&self) -> &StorageKey {
        &self.storage_key
    }

    pub fn key_ring(&self) -> &KeyRing {
        &self.keys
    }

    pub fn set_key_ring(&mut self, keys: KeyRing) -> Result<(), StorageError> {
        self.keys = keys;
        self.persist()
    }

    pub fn last_known_good(&self) -> Option<&PartnershipManifest> {
        self.last_known_good.as_ref()
    }

    pub fn set_last_known_good(
        &mut self,
        manifest: PartnershipManifest,
    ) -> Result<(), StorageError> {
        self.last_known_good = Some(manifest);
        self.persist()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn sealed_blob_roundtrip_and_tamper() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let key = StorageKey::generate(&mut rng);
        let mut blob = key.seal(b"secret state", &mut rng);
        assert_eq!(&key.unseal(&blob).unwrap()[..], b"secret state");
        let other = StorageKey::generate(&mut rng);
        assert!(other.unseal(&blob).is_none());
        let last = blob.len() - 1;
        blob[last] ^= 1;
        assert!(key.unseal(&blob).is_none());
        assert!(key.unseal(b"short").is_none());
    }

    #[test]
    fn secure_store_persists_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.keys");
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut store = SecureStore::open_or_init(&path, &mut rng, 10).unwrap();
        let mut ring = store.key_ring().clone();
        ring.rotate(&mut rng, 20);
        let current = ring.current().public();
        store.set_key_ring(ring).unwrap();

        let reopened = SecureStore::open_or_init(&path, &mut rng, 99).unwrap();
        assert_eq!(reopened.key_ring().current().public(), current);
        assert_eq!(reopened.key_ring().current().epoch, 2);

        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            let mode = fs::metadata(&path).unwrap().permissions().mode();
            assert_eq!(mode & 0o777, 0o600);
        }
    }

    #[test]
    fn corrupt_record_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.keys");
        fs::write(&path, b"{\"storageKey\":1}").unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        assert!(matches!(
            SecureStore::open_or_init(&path, &mut rng, 0),
            Err(StorageError::BadRecord(_))
        ));
    }
}
