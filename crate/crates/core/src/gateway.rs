//! The privacy gateway: manifest lookup, scope truncation, consent, token
//! issuance and envelope sealing, in that order, one transaction at a time.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use rand::RngCore;
use thiserror::Error;

use crate::clock::Clock;
use crate::envelope::{seal, EnvelopeError, FulfillmentEnvelope};
use crate::error::ErrorCode;
use crate::keys::{EpochPublicKey, GatewayKeyEpoch, PublicSignerKey};
use crate::ledger::{AuditEntry, AuditRecord, Outcome, SYSTEM_APP_ID};
use crate::manifest::{
    valid_app_id, verify_manifest_bytes, BootError, ManifestEntry, TrustState, UnknownApp,
};
use crate::pim::{Pim, PimError, RevocationRecord, TransactionInfo, UserProfile};
use crate::schema::{enforce_cse, AccessTier, CseError, RequestContext, ScopeSet};
use crate::storage::{SecureStore, StorageError};
use crate::token::ScopeToken;

/// How long a consent prompt stays open.
pub const CONSENT_TIMEOUT_SECS: u64 = 120;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentityRequest {
    pub app_id: String,
    pub context: RequestContext,
    pub requested_scopes: ScopeSet,
    pub transaction_id: String,
}

/// What the consent surface is shown. Carries the truncated set only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsentPrompt {
    pub transaction_id: String,
    pub app_id: String,
    pub context: RequestContext,
    pub truncated_scopes: ScopeSet,
    pub deadline: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsentValue {
    Approved,
    Denied,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConsentDecision {
    pub value: ConsentValue,
    /// Echo of the set that was shown.
    pub decided_scopes: ScopeSet,
}

impl ConsentDecision {
    pub fn approve(prompt: &ConsentPrompt) -> Self {
        ConsentDecision {
            value: ConsentValue::Approved,
            decided_scopes: prompt.truncated_scopes,
        }
    }

    pub fn deny(prompt: &ConsentPrompt) -> Self {
        ConsentDecision {
            value: ConsentValue::Denied,
            decided_scopes: prompt.truncated_scopes,
        }
    }
}

/// The consent surface. Implementations must return by `prompt.deadline`;
/// decisions observed after it are treated as denials.
pub trait ConsentAgent {
    fn decide(&self, prompt: &ConsentPrompt) -> ConsentDecision;
}

impl<F: Fn(&ConsentPrompt) -> ConsentDecision> ConsentAgent for F {
    fn decide(&self, prompt: &ConsentPrompt) -> ConsentDecision {
        self(prompt)
    }
}

pub struct ApproveAll;

impl ConsentAgent for ApproveAll {
    fn decide(&self, prompt: &ConsentPrompt) -> ConsentDecision {
        ConsentDecision::approve(prompt)
    }
}

pub struct DenyAll;

impl ConsentAgent for DenyAll {
    fn decide(&self, prompt: &ConsentPrompt) -> ConsentDecision {
        ConsentDecision::deny(prompt)
    }
}

/// Successful transaction. `envelope` is `None` only when none of the
/// authorized fields hold a value (for example after a purge).
#[derive(Debug, Clone)]
pub struct Fulfillment {
    pub transaction_id: String,
    pub authorized_scopes: ScopeSet,
    pub absent_scopes: ScopeSet,
    pub envelope: Option<FulfillmentEnvelope>,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error(transparent)]
    UnknownApp(#[from] UnknownApp),
    #[error("scope violation: {0}")]
    ScopeViolation(#[from] CseError),
    #[error("user denied consent")]
    ConsentDenied,
    #[error("authorization for `{0}` has been revoked")]
    AuthorizationRevoked(String),
    #[error("manifest entry for `{0}` is unusable")]
    ManifestInvalid(String),
    #[error(transparent)]
    Pim(PimError),
    #[error("sealing failed: {0}")]
    Envelope(#[from] EnvelopeError),
    #[error(transparent)]
    Storage(#[from] StorageError),
}

impl From<PimError> for GatewayError {
    fn from(e: PimError) -> Self {
        match e {
            PimError::Storage(s) => GatewayError::Storage(s),
            PimError::AuthorizationRevoked(app) => GatewayError::AuthorizationRevoked(app),
            other => GatewayError::Pim(other),
        }
    }
}

impl GatewayError {
    /// Internal failures surface as a bare protocol error.
    pub fn code(&self) -> ErrorCode {
        match self {
            GatewayError::UnknownApp(_) => ErrorCode::UnknownApp,
            GatewayError::ScopeViolation(_) => ErrorCode::ScopeViolation,
            GatewayError::ConsentDenied => ErrorCode::ConsentDenied,
            GatewayError::AuthorizationRevoked(_) => ErrorCode::AuthorizationRevoked,
            GatewayError::ManifestInvalid(_) => ErrorCode::ManifestInvalid,
            GatewayError::Pim(e) => e.code().unwrap_or(ErrorCode::ProtocolError),
            GatewayError::Envelope(_) | GatewayError::Storage(_) => ErrorCode::ProtocolError,
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayBootError {
    #[error(transparent)]
    Manifest(#[from] BootError),
    #[error("key store: {0}")]
    Store(#[from] StorageError),
}

/// On-disk locations of the simulated secure storage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StorePaths {
    pub secure: PathBuf,
    pub vault: PathBuf,
}

impl StorePaths {
    pub fn in_dir(dir: &Path) -> Self {
        StorePaths {
            secure: dir.join("secure.json"),
            vault: dir.join("vault.bin"),
        }
    }
}

type Rng = Box<dyn RngCore + Send>;

pub struct Gateway {
    trust: TrustState,
    secure: Mutex<SecureStore>,
    pim: Mutex<Pim>,
    /// The single enforcement point. Held for a whole transaction; ledger
    /// reads take only the PIM lock and are not blocked by consent waits.
    queue: Mutex<()>,
    clock: Arc<dyn Clock>,
    rng: Mutex<Rng>,
    captured: Mutex<Option<Vec<ScopeToken>>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl Gateway {
    /// Boots from the manifest file and, if given, persistent secure storage.
    pub fn boot(
        manifest_path: &Path,
        root: &PublicSignerKey,
        store: Option<&StorePaths>,
        clock: Arc<dyn Clock>,
        rng: Rng,
    ) -> Result<Gateway, GatewayBootError> {
        let bytes = fs::read(manifest_path).map_err(|e| match e.kind() {
            ErrorKind::NotFound => BootError::ManifestMissing(manifest_path.display().to_string()),
            _ => BootError::Io(e),
        })?;
        Gateway::boot_from_bytes(&bytes, root, store, clock, rng)
    }

    pub fn boot_from_bytes(
        manifest: &[u8],
        root: &PublicSignerKey,
        store: Option<&StorePaths>,
        clock: Arc<dyn Clock>,
        mut rng: Rng,
    ) -> Result<Gateway, GatewayBootError> {
        let now = clock.now();
        let mut secure = match store {
            Some(p) => SecureStore::open_or_init(&p.secure, &mut rng, now)?,
            None => SecureStore::ephemeral(&mut rng, now),
        };
        let trust = verify_manifest_bytes(manifest, root, secure.last_known_good())?;
        let mut pim = match store {
            Some(p) => Pim::open(&p.vault, secure.storage_key().clone())?,
            None => Pim::in_memory(),
        };
        if trust.is_verified() {
            if secure.last_known_good() != Some(&trust.manifest) {
                secure.set_last_known_good(trust.manifest.clone())?;
            }
        } else {
            log::warn!(
                "manifest failed verification ({:?}); every app clamped to Standard",
                trust.reason
            );
            pim.record(AuditRecord::new(
                now,
                SYSTEM_APP_ID,
                Outcome::ManifestDegraded,
            ))?;
        }
        Ok(Gateway {
            trust,
            secure: Mutex::new(secure),
            pim: Mutex::new(pim),
            queue: Mutex::new(()),
            clock,
            rng: Mutex::new(rng),
            captured: Mutex::new(None),
        })
    }

    pub fn trust(&self) -> &TrustState {
        &self.trust
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    pub fn epoch_public(&self) -> EpochPublicKey {
        lock(&self.secure).key_ring().current().public()
    }

    pub fn retired_epochs(&self) -> Vec<EpochPublicKey> {
        lock(&self.secure).key_ring().retired().to_vec()
    }

    /// Effective tier after any degradation clamp.
    pub fn tier(&self, app_id: &str) -> Result<AccessTier, UnknownApp> {
        self.trust.lookup_tier(app_id)
    }

    fn record(&self, record: AuditRecord) -> Result<(), GatewayError> {
        lock(&self.pim).record(record)?;
        Ok(())
    }

    fn fail(&self, base: AuditRecord, err: GatewayError) -> GatewayError {
        let mut rec = base;
        rec.outcome = match err {
            GatewayError::ConsentDenied => Outcome::Denied,
            ref e => Outcome::Error(e.code().code()),
        };
        match self.record(rec) {
            Ok(()) => err,
            Err(storage) => storage,
        }
    }

    fn usable_entry(&self, app_id: &str) -> Result<&ManifestEntry, GatewayError> {
        let entry = self
            .trust
            .entry(app_id)
            .ok_or_else(|| UnknownApp(app_id.to_owned()))?;
        if !valid_app_id(&entry.app_id) || entry.public_key().is_err() {
            return Err(GatewayError::ManifestInvalid(app_id.to_owned()));
        }
        Ok(entry)
    }

    /// Runs one request-consent-fulfill transaction. Appends exactly one
    /// ledger entry whatever the outcome.
    pub fn handle_request(
        &self,
        req: &IdentityRequest,
        consent: &dyn ConsentAgent,
    ) -> Result<Fulfillment, GatewayError> {
        let _turn = lock(&self.queue);
        let now = self.clock.now();
        let base = AuditRecord::new(now, req.app_id.clone(), Outcome::Granted)
            .context(req.context)
            .requested(req.requested_scopes);

        let tier = match self.trust.lookup_tier(&req.app_id) {
            Ok(t) => t,
            Err(e) => return Err(self.fail(base, e.into())),
        };
        let truncated = match enforce_cse(tier, req.context, req.requested_scopes) {
            Ok(s) => s,
            Err(e) => return Err(self.fail(base, e.into())),
        };
        // failure entries keep authorizedScopes empty: nothing was released
        // a revoked app never reaches the consent surface
        if lock(&self.pim).is_revoked(&req.app_id) {
            let e = GatewayError::AuthorizationRevoked(req.app_id.clone());
            return Err(self.fail(base, e));
        }
        let entry = match self.usable_entry(&req.app_id) {
            Ok(e) => e,
            Err(e) => return Err(self.fail(base, e)),
        };

        let prompt = ConsentPrompt {
            transaction_id: req.transaction_id.clone(),
            app_id: req.app_id.clone(),
            context: req.context,
            truncated_scopes: truncated,
            deadline: now + CONSENT_TIMEOUT_SECS,
        };
        let decision = consent.decide(&prompt);
        let approved = decision.value == ConsentValue::Approved
            && decision.decided_scopes == truncated
            && self.clock.now() <= prompt.deadline;
        if !approved {
            return Err(self.fail(base, GatewayError::ConsentDenied));
        }

        let token = self.mint(&req.app_id, truncated)?;
        let tx = TransactionInfo {
            context: req.context,
            requested: req.requested_scopes,
        };
        self.fulfill(&token, entry, tx, &req.transaction_id)
    }

    /// Audits a request refused before it became an [`IdentityRequest`],
    /// for example one naming a field outside the schema.
    pub fn record_rejection(
        &self,
        app_id: &str,
        context: RequestContext,
        requested: ScopeSet,
        code: ErrorCode,
    ) -> Result<(), GatewayError> {
        let _turn = lock(&self.queue);
        self.record(
            AuditRecord::new(self.clock.now(), app_id, Outcome::Error(code.code()))
                .context(context)
                .requested(requested),
        )
    }

    fn mint(&self, app_id: &str, scopes: ScopeSet) -> Result<ScopeToken, GatewayError> {
        let nonce = lock(&self.pim).next_nonce(app_id)?;
        let token = {
            let secure = lock(&self.secure);
            ScopeToken::sign(
                app_id,
                scopes,
                nonce,
                self.clock.now(),
                secure.key_ring().current(),
            )
        };
        if let Some(log) = lock(&self.captured).as_mut() {
            log.push(token.clone());
        }
        Ok(token)
    }

    fn fulfill(
        &self,
        token: &ScopeToken,
        entry: &ManifestEntry,
        tx: TransactionInfo,
        transaction_id: &str,
    ) -> Result<Fulfillment, GatewayError> {
        let epoch: GatewayKeyEpoch = lock(&self.secure).key_ring().current().clone();
        let extraction = lock(&self.pim).extract(token, self.clock.now(), &epoch.public(), tx)?;
        let envelope = if extraction.payload.is_empty() {
            None
        } else {
            let mut rng = lock(&self.rng);
            Some(seal(&extraction.payload, entry, &epoch, &mut *rng)?)
        };
        Ok(Fulfillment {
            transaction_id: transaction_id.to_owned(),
            authorized_scopes: token.authorized_scopes,
            absent_scopes: extraction.absent,
            envelope,
        })
    }

    /// Signs a token for `scopes` and persists the nonce counter. Tokens are
    /// never released to apps; this is for the enforcement path and tests.
    pub fn issue_token(&self, app_id: &str, scopes: ScopeSet) -> Result<ScopeToken, GatewayError> {
        let _turn = lock(&self.queue);
        self.trust
            .entry(app_id)
            .ok_or_else(|| UnknownApp(app_id.to_owned()))?;
        self.mint(app_id, scopes)
    }

    /// Hands a token to the PIM as the gateway would mid-transaction. Models
    /// an attacker who captured a token re-injecting it.
    pub fn present_token(
        &self,
        token: &ScopeToken,
        tx: TransactionInfo,
        transaction_id: &str,
    ) -> Result<Fulfillment, GatewayError> {
        let _turn = lock(&self.queue);
        let entry = match self.usable_entry(&token.app_id) {
            Ok(e) => e,
            Err(e) => {
                let base =
                    AuditRecord::new(self.clock.now(), token.app_id.clone(), Outcome::Granted)
                        .context(tx.context)
                        .requested(tx.requested)
                        .authorized(token.authorized_scopes);
                return Err(self.fail(base, e));
            }
        };
        self.fulfill(token, entry, tx, transaction_id)
    }

    /// Starts recording every token minted from now on (bus-sniffing adversary).
    pub fn capture_tokens(&self) {
        *lock(&self.captured) = Some(Vec::new());
    }

    pub fn take_captured_tokens(&self) -> Vec<ScopeToken> {
        lock(&self.captured)
            .as_mut()
            .map(std::mem::take)
            .unwrap_or_default()
    }

    pub fn revoke(&self, app_id: &str) -> Result<RevocationRecord, GatewayError> {
        let _turn = lock(&self.queue);
        self.trust
            .entry(app_id)
            .ok_or_else(|| UnknownApp(app_id.to_owned()))?;
        Ok(lock(&self.pim).revoke(app_id, self.clock.now())?)
    }

    pub fn re_consent(&self, app_id: &str) -> Result<(), GatewayError> {
        let _turn = lock(&self.queue);
        self.trust
            .entry(app_id)
            .ok_or_else(|| UnknownApp(app_id.to_owned()))?;
        Ok(lock(&self.pim).re_consent(app_id, self.clock.now())?)
    }

    pub fn is_revoked(&self, app_id: &str) -> bool {
        lock(&self.pim).is_revoked(app_id)
    }

    pub fn purge(&self) -> Result<(), GatewayError> {
        let _turn = lock(&self.queue);
        Ok(lock(&self.pim).purge(self.clock.now())?)
    }

    pub fn set_profile(&self, profile: UserProfile) -> Result<(), GatewayError> {
        let _turn = lock(&self.queue);
        Ok(lock(&self.pim).set_profile(profile)?)
    }

    pub fn profile_fields(&self) -> ScopeSet {
        lock(&self.pim).profile().fields()
    }

    /// Retires the current signing epoch. Tokens and envelopes from the old
    /// epoch stop verifying.
    pub fn rotate_keys(&self) -> Result<EpochPublicKey, GatewayError> {
        let _turn = lock(&self.queue);
        let mut secure = lock(&self.secure);
        let mut ring = secure.key_ring().clone();
        let epoch = {
            let mut rng = lock(&self.rng);
            ring.rotate(&mut *rng, self.clock.now()).public()
        };
        secure.set_key_ring(ring)?;
        Ok(epoch)
    }

    pub fn ledger_entries(&self) -> Vec<AuditEntry> {
        lock(&self.pim).ledger().entries().to_vec()
    }

    pub fn ledger_len(&self) -> usize {
        lock(&self.pim).ledger().len()
    }

    /// Newline-delimited canonical JSON, hashes in hex.
    pub fn export_ledger(&self) -> String {
        lock(&self.pim).ledger().export()
    }

    pub fn verify_ledger(&self) -> bool {
        lock(&self.pim).verify_ledger()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::envelope::open;
    use crate::keys::{AppKeyPair, SignerKey};
    use crate::manifest::ManifestIssuer;
    use crate::schema::PiiField::{self, *};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::cell::RefCell;

    struct Fixture {
        gw: Gateway,
        clock: ManualClock,
        std_key: AppKeyPair,
        prem_key: AppKeyPair,
    }

    fn fixture() -> Fixture {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let std_key = AppKeyPair::generate(&mut rng);
        let prem_key = AppKeyPair::generate(&mut rng);
        let mut issuer = ManifestIssuer::new(SignerKey::generate(&mut rng), None);
        let manifest = issuer
            .provision(
                vec![
                    ManifestEntry::new("std.app", AccessTier::Standard, std_key.public(), b"s"),
                    ManifestEntry::new("prem.app", AccessTier::Premium, prem_key.public(), b"p"),
                ],
                1,
                0,
            )
            .unwrap();
        let clock = ManualClock::new(1000);
        let gw = Gateway::boot_from_bytes(
            &manifest.to_canonical_bytes(),
            &issuer.root_public(),
            None,
            Arc::new(clock.clone()),
            Box::new(rng),
        )
        .unwrap();
        let mut profile = UserProfile::new();
        for f in PiiField::ALL {
            profile.set(f, format!("sentinel-{}", f.as_str())).unwrap();
        }
        gw.set_profile(profile).unwrap();
        Fixture {
            gw,
            clock,
            std_key,
            prem_key,
        }
    }

    fn req(app: &str, ctx: RequestContext, scopes: &[PiiField]) -> IdentityRequest {
        IdentityRequest {
            app_id: app.into(),
            context: ctx,
            requested_scopes: scopes.iter().copied().collect(),
            transaction_id: "tx".into(),
        }
    }

    const FIVE: [PiiField; 5] = [Email, FirstName, LastName, Street, DateOfBirth];

    #[test]
    fn standard_sign_in_yields_only_email() {
        let f = fixture();
        let out =
            f.gw.handle_request(&req("std.app", RequestContext::SignIn, &FIVE), &ApproveAll)
                .unwrap();
        let payload = open(
            out.envelope.as_ref().unwrap(),
            &f.std_key,
            &f.gw.epoch_public(),
        )
        .unwrap();
        assert_eq!(payload.fields(), ScopeSet::from([Email]));
        assert_eq!(payload.get(Email), Some("sentinel-email"));
    }

    #[test]
    fn consent_sees_truncated_set_only() {
        let f = fixture();
        let seen = RefCell::new(Vec::new());
        let spy = |p: &ConsentPrompt| {
            seen.borrow_mut().push(p.truncated_scopes);
            ConsentDecision::approve(p)
        };
        f.gw.handle_request(&req("std.app", RequestContext::SignUp, &FIVE), &spy)
            .unwrap();
        assert_eq!(seen.borrow()[0], ScopeSet::from([Email]));
    }

    #[test]
    fn denial_is_one_entry_and_no_extraction() {
        let f = fixture();
        let before = f.gw.ledger_len();
        let err =
            f.gw.handle_request(&req("std.app", RequestContext::SignIn, &[Email]), &DenyAll)
                .unwrap_err();
        assert_eq!(err.code(), ErrorCode::ConsentDenied);
        let entries = f.gw.ledger_entries();
        assert_eq!(entries.len(), before + 1);
        assert_eq!(entries.last().unwrap().outcome, Outcome::Denied);
        // no nonce was drawn, so nothing reached the PIM
        let t =
            f.gw.issue_token("std.app", ScopeSet::from([Email]))
                .unwrap();
        assert_eq!(t.nonce, 1);
    }

    #[test]
    fn late_or_altered_decisions_are_denials() {
        let f = fixture();
        let clock = f.clock.clone();
        let slow = move |p: &ConsentPrompt| {
            clock.advance(CONSENT_TIMEOUT_SECS + 1);
            ConsentDecision::approve(p)
        };
        let err =
            f.gw.handle_request(&req("std.app", RequestContext::SignIn, &[Email]), &slow)
                .unwrap_err();
        assert_eq!(err.code(), ErrorCode::ConsentDenied);

        let widened = |p: &ConsentPrompt| ConsentDecision {
            value: ConsentValue::Approved,
            decided_scopes: p.truncated_scopes.union(ScopeSet::from([Phone])),
        };
        let err =
            f.gw.handle_request(&req("std.app", RequestContext::SignIn, &[Email]), &widened)
                .unwrap_err();
        assert_eq!(err.code(), ErrorCode::ConsentDenied);
    }

    #[test]
    fn unknown_app_and_scope_violation() {
        let f = fixture();
        let e =
            f.gw.handle_request(&req("ghost", RequestContext::SignIn, &[Email]), &ApproveAll)
                .unwrap_err();
        assert_eq!(e.code(), ErrorCode::UnknownApp);
        let e =
            f.gw.handle_request(
                &req("std.app", RequestContext::SignIn, &[Gender]),
                &ApproveAll,
            )
            .unwrap_err();
        assert_eq!(e.code(), ErrorCode::ScopeViolation);
        let e =
            f.gw.handle_request(
                &req("std.app", RequestContext::SignUp, &[Gender, Zip]),
                &ApproveAll,
            )
            .unwrap_err();
        assert_eq!(e.code(), ErrorCode::ScopeViolation);
        let outcomes: Vec<_> = f.gw.ledger_entries().iter().map(|e| e.outcome).collect();
        assert_eq!(
            outcomes,
            vec![
                Outcome::Error(4001),
                Outcome::Error(4002),
                Outcome::Error(4002)
            ]
        );
    }

    #[test]
    fn revoked_app_never_prompts_and_reconsent_restores() {
        let f = fixture();
        f.gw.revoke("std.app").unwrap();
        let prompted = RefCell::new(0);
        let counting = |p: &ConsentPrompt| {
            *prompted.borrow_mut() += 1;
            ConsentDecision::approve(p)
        };
        let r = req("std.app", RequestContext::SignIn, &[Email]);
        let e = f.gw.handle_request(&r, &counting).unwrap_err();
        assert_eq!(e.code(), ErrorCode::AuthorizationRevoked);
        assert_eq!(*prompted.borrow(), 0);
        // other apps are unaffected
        assert!(f
            .gw
            .handle_request(
                &req("prem.app", RequestContext::SignIn, &[Email]),
                &counting
            )
            .is_ok());
        f.gw.re_consent("std.app").unwrap();
        assert!(f.gw.handle_request(&r, &counting).is_ok());
        assert_eq!(*prompted.borrow(), 2);
        assert_eq!(
            f.gw.revoke("ghost").unwrap_err().code(),
            ErrorCode::UnknownApp
        );
    }

    #[test]
    fn replayed_token_is_rejected() {
        let f = fixture();
        f.gw.capture_tokens();
        f.gw.handle_request(
            &req("std.app", RequestContext::SignIn, &[Email]),
            &ApproveAll,
        )
        .unwrap();
        let token = f.gw.take_captured_tokens().pop().unwrap();
        let tx = TransactionInfo {
            context: RequestContext::SignIn,
            requested: ScopeSet::from([Email]),
        };
        let e = f.gw.present_token(&token, tx, "replay").unwrap_err();
        assert_eq!(e.code(), ErrorCode::ReplayDetected);

        let fresh =
            f.gw.issue_token("std.app", ScopeSet::from([Email]))
                .unwrap();
        f.clock.set(fresh.expires_at + 1);
        let e = f.gw.present_token(&fresh, tx, "late").unwrap_err();
        assert_eq!(e.code(), ErrorCode::TokenExpired);
    }

    #[test]
    fn rotation_invalidates_outstanding_tokens() {
        let f = fixture();
        let token =
            f.gw.issue_token("std.app", ScopeSet::from([Email]))
                .unwrap();
        let old = f.gw.epoch_public();
        let new = f.gw.rotate_keys().unwrap();
        assert_eq!(new.epoch, old.epoch + 1);
        assert_eq!(f.gw.retired_epochs(), vec![old]);
        let tx = TransactionInfo {
            context: RequestContext::SignIn,
            requested: ScopeSet::from([Email]),
        };
        let e = f.gw.present_token(&token, tx, "t").unwrap_err();
        assert_eq!(e.code(), ErrorCode::TokenInvalid);
        let out =
            f.gw.handle_request(
                &req("prem.app", RequestContext::SignIn, &[Phone]),
                &ApproveAll,
            )
            .unwrap();
        assert!(open(out.envelope.as_ref().unwrap(), &f.prem_key, &new).is_ok());
    }

    #[test]
    fn purge_yields_empty_fulfillment() {
        let f = fixture();
        f.gw.purge().unwrap();
        let out =
            f.gw.handle_request(
                &req("prem.app", RequestContext::SignUp, &[Email, Gender]),
                &ApproveAll,
            )
            .unwrap();
        assert!(out.envelope.is_none());
        assert_eq!(out.absent_scopes, ScopeSet::from([Email, Gender]));
        assert!(f.gw.verify_ledger());
    }

    #[test]
    fn missing_manifest_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let root = SignerKey::generate(&mut rng).public();
        let r = Gateway::boot(
            &dir.path().join("absent.json"),
            &root,
            None,
            Arc::new(ManualClock::new(0)),
            Box::new(rng),
        );
        assert!(matches!(
            r,
            Err(GatewayBootError::Manifest(BootError::ManifestMissing(_)))
        ));
    }

    #[test]
    fn tampered_manifest_clamps_premium() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let prem = AppKeyPair::generate(&mut rng);
        let mut issuer = ManifestIssuer::new(SignerKey::generate(&mut rng), None);
        let m = issuer
            .provision(
                vec![ManifestEntry::new(
                    "prem.app",
                    AccessTier::Premium,
                    prem.public(),
                    b"p",
                )],
                1,
                0,
            )
            .unwrap();
        let mut bytes = m.to_canonical_bytes();
        let key = b"certFingerprint\":\"";
        let pos = bytes.windows(key.len()).position(|w| w == key).unwrap() + key.len();
        bytes[pos] ^= 1;
        let gw = Gateway::boot_from_bytes(
            &bytes,
            &issuer.root_public(),
            None,
            Arc::new(ManualClock::new(0)),
            Box::new(rng),
        )
        .unwrap();
        assert!(!gw.trust().is_verified());
        assert_eq!(gw.tier("prem.app").unwrap(), AccessTier::Standard);
        assert_eq!(gw.ledger_entries()[0].outcome, Outcome::ManifestDegraded);
        let out = gw
            .handle_request(
                &req("prem.app", RequestContext::SignUp, &PiiField::ALL),
                &ApproveAll,
            )
            .unwrap();
        assert_eq!(out.authorized_scopes, ScopeSet::from([Email, Phone]));
    }

    #[test]
    fn persistent_boot_restores_nonces_and_lkg() {
        let dir = tempfile::tempdir().unwrap();
        let paths = StorePaths::in_dir(dir.path());
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let app = AppKeyPair::generate(&mut rng);
        let mut issuer = ManifestIssuer::new(SignerKey::generate(&mut rng), None);
        let m = issuer
            .provision(
                vec![ManifestEntry::new(
                    "a",
                    AccessTier::Standard,
                    app.public(),
                    b"a",
                )],
                1,
                0,
            )
            .unwrap();
        let bytes = m.to_canonical_bytes();
        let boot = |bytes: &[u8], seed| {
            Gateway::boot_from_bytes(
                bytes,
                &issuer.root_public(),
                Some(&paths),
                Arc::new(ManualClock::new(10)),
                Box::new(ChaCha20Rng::seed_from_u64(seed)),
            )
        };
        {
            let gw = boot(&bytes, 1).unwrap();
            assert_eq!(
                gw.issue_token("a", ScopeSet::from([Email])).unwrap().nonce,
                1
            );
        }
        let gw = boot(&bytes, 2).unwrap();
        assert_eq!(
            gw.issue_token("a", ScopeSet::from([Email])).unwrap().nonce,
            2
        );
        drop(gw);
        // garbage falls back to the stored verified copy, degraded
        let gw = boot(b"{not json", 3).unwrap();
        assert!(!gw.trust().is_verified());
        assert!(gw.trust().entry("a").is_some());
        assert!(gw.verify_ledger());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn audit_totality_and_truncation(
            calls in prop::collection::vec(
                (0usize..3, any::<bool>(), 0u16..1024, any::<bool>()),
                1..20,
            )
        ) {
            let f = fixture();
            let apps = ["std.app", "prem.app", "ghost"];
            let before = f.gw.ledger_len();
            for (app, sign_in, bits, approve) in &calls {
                let ctx = if *sign_in { RequestContext::SignIn } else { RequestContext::SignUp };
                let r = IdentityRequest {
                    app_id: apps[*app].into(),
                    context: ctx,
                    requested_scopes: ScopeSet::from_bits_truncate(*bits),
                    transaction_id: "p".into(),
                };
                let spy = |p: &ConsentPrompt| {
                    let tier = f.gw.tier(&p.app_id).unwrap();
                    assert_eq!(Ok(p.truncated_scopes), enforce_cse(tier, ctx, r.requested_scopes));
                    if *approve { ConsentDecision::approve(p) } else { ConsentDecision::deny(p) }
                };
                if let Ok(out) = f.gw.handle_request(&r, &spy) {
                    let key = if *app == 0 { &f.std_key } else { &f.prem_key };
                    let payload = open(out.envelope.as_ref().unwrap(), key, &f.gw.epoch_public()).unwrap();
                    let tier = f.gw.tier(apps[*app]).unwrap();
                    prop_assert_eq!(Ok(payload.fields()), enforce_cse(tier, ctx, r.requested_scopes));
                }
            }
            prop_assert_eq!(f.gw.ledger_len() - before, calls.len());
            prop_assert!(f.gw.verify_ledger());
        }
    }
}
