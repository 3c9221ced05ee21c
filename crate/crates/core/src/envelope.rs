//! Fulfillment envelopes: the only form in which PII leaves the gateway.
//!
//! Each envelope uses a fresh session key. The key is never transmitted: the
//! gateway draws an ephemeral X25519 key, agrees a secret with the app's
//! manifest key and expands it with HKDF-SHA256. The ephemeral public key is
//! the `wrappedKey`, so only the holder of the app private key can re-derive
//! the session key. The payload is sealed with AES-256-GCM (header as AAD)
//! and the whole envelope is signed by the current gateway epoch.
//!
//! Plaintext layout, in schema order:
//!
//! ```text
//! [len(firstName)] .. [len(dateOfBirth)]   10 bytes, 0xFF = field absent
//! value bytes of each present field, concatenated
//! ```

use std::collections::BTreeMap;

use aes_gcm::aead::AeadInPlace;
use aes_gcm::{Aes256Gcm, KeyInit, Nonce};
use hkdf::Hkdf;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;
use x25519_dalek::{PublicKey as XPublicKey, StaticSecret};
use zeroize::{Zeroize, Zeroizing};

use crate::encoding::{b64, canonical_json};
use crate::keys::{AppKeyPair, EpochPublicKey, GatewayKeyEpoch, KeyError};
use crate::manifest::ManifestEntry;
use crate::schema::{PiiField, ScopeSet, MAX_VALUE_LEN};

pub const ENC_ALG: &str = "AES-256-GCM";
pub const SIG_ALG: &str = "EdDSA";
/// Serialized envelopes are strictly shorter than this.
pub const MAX_ENVELOPE_BYTES: usize = 1200;

const NONCE_LEN: usize = 12;
const TAG_LEN: usize = 16;
const ABSENT: u8 = 0xFF;
const HKDF_INFO: &[u8] = b"udss fulfillment envelope v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvelopeError {
    #[error("payload carries no fields")]
    EmptyPayload,
    #[error("value for `{field}` is {len} bytes; the cap is {MAX_VALUE_LEN}")]
    ValueTooLong { field: PiiField, len: usize },
    #[error("serialized envelope is {0} bytes; the limit is {MAX_ENVELOPE_BYTES}")]
    PayloadTooLarge(usize),
    #[error("app key is unusable: {0}")]
    InvalidAppKey(#[from] KeyError),
    #[error("envelope signed under epoch {found}, expected epoch {expected}")]
    EpochMismatch { expected: u64, found: u64 },
    #[error("gateway signature does not verify")]
    SignatureInvalid,
    #[error("ciphertext failed authentication")]
    CiphertextTampered,
    #[error("session key cannot be recovered with this private key")]
    KeyUnwrapFailure,
    #[error("malformed envelope: {0}")]
    Malformed(&'static str),
}

/// Field/value pairs destined for one app.
#[derive(Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payload(BTreeMap<PiiField, String>);

impl Payload {
    pub fn new() -> Self {
        Payload::default()
    }

    pub fn insert(
        &mut self,
        field: PiiField,
        value: impl Into<String>,
    ) -> Result<(), EnvelopeError> {
        let value = value.into();
        if value.len() > MAX_VALUE_LEN {
            return Err(EnvelopeError::ValueTooLong {
                field,
                len: value.len(),
            });
        }
        self.0.insert(field, value);
        Ok(())
    }

    pub fn get(&self, field: PiiField) -> Option<&str> {
        self.0.get(&field).map(String::as_str)
    }

    pub fn fields(&self) -> ScopeSet {
        self.0.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (PiiField, &str)> {
        self.0.iter().map(|(f, v)| (*f, v.as_str()))
    }

    fn encode(&self) -> Result<Zeroizing<Vec<u8>>, EnvelopeError> {
        let mut out = Zeroizing::new(Vec::with_capacity(PiiField::ALL.len() + 64));
        for field in PiiField::ALL {
            match self.0.get(&field) {
                Some(v) if v.len() > MAX_VALUE_LEN => {
                    return Err(EnvelopeError::ValueTooLong {
                        field,
                        len: v.len(),
                    })
                }
                Some(v) => out.push(v.len() as u8),
                None => out.push(ABSENT),
            }
        }
        for v in self.0.values() {
            out.extend_from_slice(v.as_bytes());
        }
        Ok(out)
    }

    fn decode(bytes: &[u8]) -> Result<Payload, EnvelopeError> {
        let n = PiiField::ALL.len();
        if bytes.len() < n {
            return Err(EnvelopeError::Malformed(
                "plaintext shorter than field table",
            ));
        }
        let (lens, mut rest) = bytes.split_at(n);
        let mut payload = Payload::new();
        for (field, &len) in PiiField::ALL.into_iter().zip(lens) {
            if len == ABSENT {
                continue;
            }
            let len = len as usize;
            if len > MAX_VALUE_LEN || len > rest.len() {
                return Err(EnvelopeError::Malformed("field length out of range"));
            }
            let (value, tail) = rest.split_at(len);
            let value = std::str::from_utf8(value)
                .map_err(|_| EnvelopeError::Malformed("field value is not UTF-8"))?;
            payload.0.insert(field, value.to_owned());
            rest = tail;
        }
        if !rest.is_empty() {
            return Err(EnvelopeError::Malformed("trailing plaintext bytes"));
        }
        Ok(payload)
    }
}

impl std::fmt::Debug for Payload {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // values are PII; only names go to logs
        write!(f, "Payload{}", self.fields())
    }
}

impl Drop for Payload {
    fn drop(&mut self) {
        for v in self.0.values_mut() {
            v.zeroize();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct EnvelopeHeader {
    pub app_id: String,
    pub key_epoch: u64,
    pub enc: String,
    pub sig: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct FulfillmentEnvelope {
    pub header: EnvelopeHeader,
    #[serde(with = "b64")]
    pub wrapped_key: Vec<u8>,
    #[serde(with = "b64")]
    pub nonce: Vec<u8>,
    #[serde(with = "b64")]
    pub ciphertext: Vec<u8>,
    #[serde(with = "b64")]
    pub auth_tag: Vec<u8>,
    #[serde(with = "b64")]
    pub signature: Vec<u8>,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct SignedParts<'a> {
    header: &'a EnvelopeHeader,
    #[serde(with = "b64")]
    wrapped_key: &'a [u8],
    #[serde(with = "b64")]
    nonce: &'a [u8],
    #[serde(with = "b64")]
    ciphertext: &'a [u8],
    #[serde(with = "b64")]
    auth_tag: &'a [u8],
}

impl FulfillmentEnvelope {
    fn signed_bytes(&self) -> Vec<u8> {
        canonical_json(&SignedParts {
            header: &self.header,
            wrapped_key: &self.wrapped_key,
            nonce: &self.nonce,
            ciphertext: &self.ciphertext,
            auth_tag: &self.auth_tag,
        })
        .expect("envelope serializes")
    }

    /// Canonical wire form; the size bound applies to these bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        canonical_json(self).expect("envelope serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EnvelopeError> {
        serde_json::from_slice(bytes).map_err(|_| EnvelopeError::Malformed("not an envelope"))
    }
}

/// A transaction-scoped AES key. Erased on drop.
struct SessionKey(Zeroizing<[u8; 32]>);

impl SessionKey {
    fn derive(shared: &[u8; 32], ephemeral: &[u8; 32], recipient: &[u8; 32]) -> SessionKey {
        let mut salt = [0u8; 64];
        salt[..32].copy_from_slice(ephemeral);
        salt[32..].copy_from_slice(recipient);
        let mut key = Zeroizing::new([0u8; 32]);
        Hkdf::<Sha256>::new(Some(&salt), shared)
            .expand(HKDF_INFO, key.as_mut())
            .expect("32 bytes is a valid HKDF-SHA256 output length");
        SessionKey(key)
    }

    fn cipher(&self) -> Aes256Gcm {
        Aes256Gcm::new_from_slice(self.0.as_ref()).expect("256-bit key")
    }

    #[cfg(test)]
    fn bytes(&self) -> [u8; 32] {
        *self.0
    }
}

fn header_aad(header: &EnvelopeHeader) -> Vec<u8> {
    canonical_json(header).expect("header serializes")
}

/// Encrypts `payload` to the app registered in `entry` and signs the result
/// under `epoch`. The session key is erased before this returns.
pub fn seal(
    payload: &Payload,
    entry: &ManifestEntry,
    epoch: &GatewayKeyEpoch,
    rng: &mut dyn RngCore,
) -> Result<FulfillmentEnvelope, EnvelopeError> {
    if payload.is_empty() {
        return Err(EnvelopeError::EmptyPayload);
    }
    let mut plaintext = payload.encode()?;
    let recipient = XPublicKey::from(entry.public_key()?.0);

    let mut eph_bytes = Zeroizing::new([0u8; 32]);
    rng.fill_bytes(eph_bytes.as_mut());
    let ephemeral = StaticSecret::from(*eph_bytes);
    let ephemeral_pub = XPublicKey::from(&ephemeral);
    let shared = ephemeral.diffie_hellman(&recipient);
    if !shared.was_contributory() {
        return Err(EnvelopeError::InvalidAppKey(KeyError::Malformed(
            "app public key (low order point)",
        )));
    }
    let session = SessionKey::derive(
        shared.as_bytes(),
        ephemeral_pub.as_bytes(),
        recipient.as_bytes(),
    );
    drop(shared);
    drop(ephemeral);

    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let header = EnvelopeHeader {
        app_id: entry.app_id.clone(),
        key_epoch: epoch.epoch,
        enc: ENC_ALG.to_owned(),
        sig: SIG_ALG.to_owned(),
    };
    let tag = session
        .cipher()
        .encrypt_in_place_detached(
            Nonce::from_slice(&nonce),
            &header_aad(&header),
            plaintext.as_mut(),
        )
        .map_err(|_| EnvelopeError::Malformed("plaintext too long for AES-GCM"))?;
    drop(session);

    let mut envelope = FulfillmentEnvelope {
        header,
        wrapped_key: ephemeral_pub.as_bytes().to_vec(),
        nonce: nonce.to_vec(),
        ciphertext: std::mem::take(&mut *plaintext),
        auth_tag: tag.to_vec(),
        signature: Vec::new(),
    };
    envelope.signature = epoch.signing_key.sign(&envelope.signed_bytes()).to_vec();

    let size = envelope.to_bytes().len();
    if size >= MAX_ENVELOPE_BYTES {
        return Err(EnvelopeError::PayloadTooLarge(size));
    }
    Ok(envelope)
}

fn try_decrypt(envelope: &FulfillmentEnvelope, app_key: &AppKeyPair) -> Option<Zeroizing<Vec<u8>>> {
    let ephemeral: [u8; 32] = envelope.wrapped_key.as_slice().try_into().ok()?;
    if envelope.nonce.len() != NONCE_LEN || envelope.auth_tag.len() != TAG_LEN {
        return None;
    }
    let shared = app_key
        .secret()
        .diffie_hellman(&XPublicKey::from(ephemeral));
    if !shared.was_contributory() {
        return None;
    }
    let session = SessionKey::derive(shared.as_bytes(), &ephemeral, &app_key.public().0);
    let mut buf = Zeroizing::new(envelope.ciphertext.clone());
    session
        .cipher()
        .decrypt_in_place_detached(
            Nonce::from_slice(&envelope.nonce),
            &header_aad(&envelope.header),
            buf.as_mut(),
            aes_gcm::Tag::from_slice(&envelope.auth_tag),
        )
        .ok()?;
    Some(buf)
}

/// Verifies and decrypts an envelope.
///
/// The signature and the AEAD tag are both checked and the pair of results
/// decides the error: a valid signature with a failing tag can only mean the
/// wrong private key, a failing signature with a valid tag means the
/// signature (or the epoch key) is wrong, and both failing means the
/// authenticated parts were modified.
pub fn open(
    envelope: &FulfillmentEnvelope,
    app_key: &AppKeyPair,
    epoch_key: &EpochPublicKey,
) -> Result<Payload, EnvelopeError> {
    if envelope.header.enc != ENC_ALG || envelope.header.sig != SIG_ALG {
        return Err(EnvelopeError::Malformed(
            "unsupported algorithm identifiers",
        ));
    }
    if envelope.header.key_epoch != epoch_key.epoch {
        return Err(EnvelopeError::EpochMismatch {
            expected: epoch_key.epoch,
            found: envelope.header.key_epoch,
        });
    }
    let signed = epoch_key
        .key
        .verify(&envelope.signed_bytes(), &envelope.signature)
        .is_ok();
    let plaintext = try_decrypt(envelope, app_key);
    match (signed, plaintext) {
        (true, Some(pt)) => Payload::decode(&pt),
        (true, None) => Err(EnvelopeError::KeyUnwrapFailure),
        (false, Some(_)) => Err(EnvelopeError::SignatureInvalid),
        (false, None) => Err(EnvelopeError::CiphertextTampered),
    }
}
