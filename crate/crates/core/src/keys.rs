//! Key material: gateway signing epochs, the platform root key and app
//! key-wrap keys.
//!
//! Every key is built from bytes drawn from a caller-supplied RNG so that
//! seeded simulations are reproducible.

use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use x25519_dalek::{PublicKey as XPublicKey, StaticSecret};
use zeroize::Zeroizing;

use crate::encoding::{b64_decode_array, b64_encode};

pub const SIGNATURE_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeyError {
    #[error("malformed {0} encoding")]
    Malformed(&'static str),
    #[error("signature does not verify")]
    BadSignature,
}

fn random_32(rng: &mut dyn RngCore) -> Zeroizing<[u8; 32]> {
    let mut bytes = Zeroizing::new([0u8; 32]);
    rng.fill_bytes(bytes.as_mut());
    bytes
}

/// Ed25519 signing key used for the platform root and gateway epochs.
#[derive(Clone)]
pub struct SignerKey(SigningKey);

impl SignerKey {
    pub fn generate(rng: &mut dyn RngCore) -> Self {
        SignerKey(SigningKey::from_bytes(&random_32(rng)))
    }

    pub fn from_b64(text: &str) -> Result<Self, KeyError> {
        let bytes =
            Zeroizing::new(b64_decode_array::<32>(text).ok_or(KeyError::Malformed("signing key"))?);
        Ok(SignerKey(SigningKey::from_bytes(&bytes)))
    }

    pub fn to_b64(&self) -> String {
        b64_encode(self.0.as_bytes())
    }

    pub fn public(&self) -> PublicSignerKey {
        PublicSignerKey(self.0.verifying_key())
    }

    pub fn sign(&self, msg: &[u8]) -> [u8; SIGNATURE_LEN] {
        self.0.sign(msg).to_bytes()
    }
}

impl std::fmt::Debug for SignerKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_tuple("SignerKey").field(&self.public()).finish()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct PublicSignerKey(VerifyingKey);

impl PublicSignerKey {
    pub fn from_b64(text: &str) -> Result<Self, KeyError> {
        let bytes = b64_decode_array::<32>(text).ok_or(KeyError::Malformed("verification key"))?;
        VerifyingKey::from_bytes(&bytes)
            .map(PublicSignerKey)
            .map_err(|_| KeyError::Malformed("verification key"))
    }

    pub fn to_b64(&self) -> String {
        b64_encode(self.0.as_bytes())
    }

    /// Strict verification; any signature length other than 64 bytes fails.
    pub fn verify(&self, msg: &[u8], signature: &[u8]) -> Result<(), KeyError> {
        let sig = Signature::from_slice(signature).map_err(|_| KeyError::BadSignature)?;
        self.0
            .verify_strict(msg, &sig)
            .map_err(|_| KeyError::BadSignature)
    }
}

impl std::fmt::Debug for PublicSignerKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PublicSignerKey({})", self.to_b64())
    }
}

/// An application's X25519 key pair; the public half is registered in the
/// partnership manifest and envelopes are wrapped to it.
#[derive(Clone)]
pub struct AppKeyPair {
    secret: StaticSecret,
}

impl AppKeyPair {
    pub fn generate(rng: &mut dyn RngCore) -> Self {
        AppKeyPair {
            secret: StaticSecret::from(*random_32(rng)),
        }
    }

    pub fn from_b64(text: &str) -> Result<Self, KeyError> {
        let bytes = Zeroizing::new(
            b64_decode_array::<32>(text).ok_or(KeyError::Malformed("app private key"))?,
        );
        Ok(AppKeyPair {
            secret: StaticSecret::from(*bytes),
        })
    }

    pub fn secret_b64(&self) -> String {
        b64_encode(self.secret.as_bytes())
    }

    pub fn public(&self) -> AppPublicKey {
        AppPublicKey(XPublicKey::from(&self.secret).to_bytes())
    }

    pub(crate) fn secret(&self) -> &StaticSecret {
        &self.secret
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct AppPublicKey(pub [u8; 32]);

impl AppPublicKey {
    pub fn from_b64(text: &str) -> Result<Self, KeyError> {
        b64_decode_array::<32>(text)
            .map(AppPublicKey)
            .ok_or(KeyError::Malformed("app public key"))
    }

    pub fn to_b64(&self) -> String {
        b64_encode(&self.0)
    }
}

impl std::fmt::Debug for AppPublicKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "AppPublicKey({})", self.to_b64())
    }
}

/// One generation of the gateway's signing key.
#[derive(Debug, Clone)]
pub struct GatewayKeyEpoch {
    pub epoch: u64,
    pub signing_key: SignerKey,
    pub created_at: u64,
}

impl GatewayKeyEpoch {
    pub fn public(&self) -> EpochPublicKey {
        EpochPublicKey {
            epoch: self.epoch,
            key: self.signing_key.public(),
        }
    }
}

/// Verification half of an epoch, tagged with its epoch number.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochPublicKey {
    pub epoch: u64,
    pub key: PublicSignerKey,
}

/// Persisted form of an epoch inside the secure store.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StoredEpoch {
    pub epoch: u64,
    pub signing_key: String,
    pub created_at: u64,
}

/// The gateway's signing epochs. Only the newest is current; retired epochs
/// keep their public half for auditing but never sign again.
#[derive(Debug, Clone)]
pub struct KeyRing {
    current: GatewayKeyEpoch,
    retired: Vec<EpochPublicKey>,
}

impl KeyRing {
    pub fn provision(rng: &mut dyn RngCore, now: u64) -> Self {
        KeyRing {
            current: GatewayKeyEpoch {
                epoch: 1,
                signing_key: SignerKey::generate(rng),
                created_at: now,
            },
            retired: Vec::new(),
        }
    }

    pub fn current(&self) -> &GatewayKeyEpoch {
        &self.current
    }

    pub fn retired(&self) -> &[EpochPublicKey] {
        &self.retired
    }

    /// Replaces the current epoch with `epoch + 1`. No grace window: tokens
    /// live at most 30 s, so anything signed under the old key simply expires.
    pub fn rotate(&mut self, rng: &mut dyn RngCore, now: u64) -> &GatewayKeyEpoch {
        let next = GatewayKeyEpoch {
            epoch: self.current.epoch + 1,
            signing_key: SignerKey::generate(rng),
            created_at: now,
        };
        let old = std::mem::replace(&mut self.current, next);
        self.retired.push(old.public());
        &self.current
    }

    /// Whether an annual rotation is due at `now`.
    pub fn rotation_due(&self, now: u64, max_age_secs: u64) -> bool {
        now.saturating_sub(self.current.created_at) >= max_age_secs
    }

    pub fn to_stored(&self) -> (StoredEpoch, Vec<(u64, String)>) {
        (
            StoredEpoch {
                epoch: self.current.epoch,
                signing_key: self.current.signing_key.to_b64(),
                created_at: self.current.created_at,
            },
            self.retired
                .iter()
                .map(|p| (p.epoch, p.key.to_b64()))
                .collect(),
        )
    }

    pub fn from_stored(current: &StoredEpoch, retired: &[(u64, String)]) -> Result<Self, KeyError> {
        if current.epoch == 0 {
            return Err(KeyError::Malformed("epoch number"));
        }
        let retired = retired
            .iter()
            .map(|(epoch, key)| {
                Ok(EpochPublicKey {
                    epoch: *epoch,
                    key: PublicSignerKey::from_b64(key)?,
                })
            })
            .collect::<Result<Vec<_>, KeyError>>()?;
        Ok(KeyRing {
            current: GatewayKeyEpoch {
                epoch: current.epoch,
                signing_key: SignerKey::from_b64(&current.signing_key)?,
                created_at: current.created_at,
            },
            retired,
        })
    }
}

/// One year, the default rotation period.
pub const ANNUAL_ROTATION_SECS: u64 = 365 * 24 * 60 * 60;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn sign_verify_and_codec() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let key = SignerKey::generate(&mut rng);
        let sig = key.sign(b"hello");
        let public = PublicSignerKey::from_b64(&key.public().to_b64()).unwrap();
        assert!(public.verify(b"hello", &sig).is_ok());
        assert_eq!(public.verify(b"hellp", &sig), Err(KeyError::BadSignature));
        assert_eq!(
            public.verify(b"hello", &sig[..63]),
            Err(KeyError::BadSignature)
        );
        let restored = SignerKey::from_b64(&key.to_b64()).unwrap();
        assert_eq!(restored.public(), key.public());
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let a = AppKeyPair::generate(&mut ChaCha20Rng::seed_from_u64(9)).public();
        let b = AppKeyPair::generate(&mut ChaCha20Rng::seed_from_u64(9)).public();
        assert_eq!(a, b);
    }

    #[test]
    fn rotation_keeps_exactly_one_current() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut ring = KeyRing::provision(&mut rng, 0);
        let first = ring.current().public();
        ring.rotate(&mut rng, 10);
        ring.rotate(&mut rng, 20);
        assert_eq!(ring.current().epoch, 3);
        assert_eq!(ring.retired().len(), 2);
        assert_eq!(ring.retired()[0], first);
        assert!(ring.retired().iter().all(|r| r.epoch < 3));

        let (cur, old) = ring.to_stored();
        let back = KeyRing::from_stored(&cur, &old).unwrap();
        assert_eq!(back.current().public(), ring.current().public());
        assert_eq!(back.retired(), ring.retired());
    }

    #[test]
    fn rotation_policy_hook() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let ring = KeyRing::provision(&mut rng, 100);
        assert!(!ring.rotation_due(100 + ANNUAL_ROTATION_SECS - 1, ANNUAL_ROTATION_SECS));
        assert!(ring.rotation_due(100 + ANNUAL_ROTATION_SECS, ANNUAL_ROTATION_SECS));
    }
}
