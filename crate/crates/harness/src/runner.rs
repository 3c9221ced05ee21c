//! Executes scenario scripts against UDSS (over the real socket service) or
//! against the OAuth-style passthrough baseline.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use udss_core::clock::ManualClock;
use udss_core::envelope::open;
use udss_core::keys::{AppKeyPair, SignerKey};
use udss_core::manifest::{provision_manifest, ManifestEntry};
use udss_core::pim::TransactionInfo;
use udss_core::schema::enforce_cse;
use udss_core::wire::{AppClient, ConsentMode, Message, Service};
use udss_core::{
    ConsentAgent, ConsentDecision, ConsentPrompt, ErrorCode, Gateway, RequestContext, ScopeSet,
    StorePaths,
};

use crate::report::{ExposureReport, ScenarioReport, Target, TransactionRecord};
use crate::scenario::{ConsentPolicy, Misbehavior, ScenarioScript};
use crate::{sentinel_profile, HarnessError, SIM_EPOCH};

/// Scripted user: answers prompts according to the scenario policy.
pub struct PolicyAgent {
    policy: ConsentPolicy,
    prompts: AtomicUsize,
}

impl PolicyAgent {
    pub fn new(policy: ConsentPolicy) -> Self {
        PolicyAgent {
            policy,
            prompts: AtomicUsize::new(0),
        }
    }

    fn next(&self) -> bool {
        self.policy
            .approves(self.prompts.fetch_add(1, Ordering::SeqCst))
    }
}

impl ConsentAgent for PolicyAgent {
    fn decide(&self, prompt: &ConsentPrompt) -> ConsentDecision {
        if self.next() {
            ConsentDecision::approve(prompt)
        } else {
            ConsentDecision::deny(prompt)
        }
    }
}

fn outcome_name(code: u16) -> String {
    if code == ErrorCode::ConsentDenied.code() {
        "DENIED".into()
    } else {
        format!("ERROR_{code}")
    }
}

fn workflow(script: &ScenarioScript) -> RequestContext {
    script
        .app_behaviors
        .first()
        .map(|b| b.context)
        .unwrap_or(RequestContext::SignIn)
}

#[derive(Default)]
struct Tally {
    transactions: Vec<TransactionRecord>,
    replay_attempts: usize,
    replay_rejections: usize,
    replay_fields: u64,
    eavesdrop_attempts: usize,
    eavesdropped_fields: u64,
}

impl Tally {
    fn finish(
        self,
        script: &ScenarioScript,
        target: Target,
        seed: u64,
        degraded: bool,
        ledger: Option<(Vec<String>, bool)>,
    ) -> ScenarioReport {
        let counts = self
            .transactions
            .iter()
            .map(|t| t.delivered.len() as u64)
            .collect();
        let violations = self
            .transactions
            .iter()
            .filter(|t| {
                target == Target::Udss && !t.delivered.is_subset(t.allowed.unwrap_or_default())
            })
            .count();
        let (ledger_outcomes, ledger_verified) = match ledger {
            Some((o, v)) => (o, Some(v)),
            None => (Vec::new(), None),
        };
        ScenarioReport {
            scenario: script.name.clone(),
            target,
            seed,
            exposure: ExposureReport::new(workflow(script), target, counts),
            transactions: self.transactions,
            replay_attempts: self.replay_attempts,
            replay_rejections: self.replay_rejections,
            replay_fields: self.replay_fields,
            eavesdrop_attempts: self.eavesdrop_attempts,
            eavesdropped_fields: self.eavesdropped_fields,
            enforcement_violations: violations,
            manifest_degraded: degraded,
            ledger_outcomes,
            ledger_verified,
        }
    }
}

pub fn run_scenario(
    script: &ScenarioScript,
    target: Target,
    seed: u64,
) -> Result<ScenarioReport, HarnessError> {
    match target {
        Target::Udss => run_udss(script, seed),
        Target::Baseline => Ok(run_baseline(script, seed)),
    }
}

/// Flips one bit of `bytes` chosen by `rng`; returns the bit index.
pub fn flip_random_bit(bytes: &mut [u8], rng: &mut impl Rng) -> usize {
    let bit = rng.gen_range(0..bytes.len() * 8);
    bytes[bit / 8] ^= 1 << (bit % 8);
    bit
}

/// Boots a gateway for the script's app registry, serves it on a private
/// socket and drives every transaction through [`AppClient`].
pub fn run_udss(script: &ScenarioScript, seed: u64) -> Result<ScenarioReport, HarnessError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let root = SignerKey::generate(&mut rng);
    let mut keys = BTreeMap::new();
    let mut entries = Vec::new();
    for app in &script.apps {
        let key = AppKeyPair::generate(&mut rng);
        entries.push(ManifestEntry::new(
            &app.app_id,
            app.tier,
            key.public(),
            app.app_id.as_bytes(),
        ));
        keys.insert(app.app_id.clone(), key);
    }
    let manifest = provision_manifest(entries, 1, SIM_EPOCH, &root, None)?;
    let mut manifest_bytes = manifest.to_canonical_bytes();

    let dir = tempfile::tempdir()?;
    let store = StorePaths::in_dir(dir.path());
    let clock = ManualClock::new(SIM_EPOCH);
    if script.tampers_manifest() {
        // an honest boot first, so the store holds a verified copy
        Gateway::boot_from_bytes(
            &manifest_bytes,
            &root.public(),
            Some(&store),
            Arc::new(clock.clone()),
            Box::new(ChaCha20Rng::seed_from_u64(rng.next_u64())),
        )?;
        flip_random_bit(&mut manifest_bytes, &mut rng);
    }
    let gateway = Gateway::boot_from_bytes(
        &manifest_bytes,
        &root.public(),
        Some(&store),
        Arc::new(clock.clone()),
        Box::new(ChaCha20Rng::seed_from_u64(rng.next_u64())),
    )?;
    gateway.set_profile(sentinel_profile())?;
    let degraded = !gateway.trust().is_verified();

    let agent = Arc::new(PolicyAgent::new(script.consent_policy));
    let handle = Service::new(Arc::new(gateway), ConsentMode::Scripted(agent))
        .serve(&dir.path().join("udss.sock"))?;
    let gw = handle.service().gateway().clone();
    let mut client = AppClient::connect(handle.socket_path())?;
    let epoch_key = client.gateway_key()?;

    let mut tally = Tally::default();
    for trial in 0..script.trials {
        for (i, b) in script.app_behaviors.iter().enumerate() {
            clock.advance(1);
            if b.misbehavior == Misbehavior::Replay {
                gw.capture_tokens();
            }
            let names = b.requested_scopes.names();
            let txid = format!("{}-{trial}-{i}", script.name);
            let reply = client.request(&b.app_id, b.context, &names, &txid)?;
            let (outcome, delivered, envelope) = match reply {
                Message::IdentityFulfillment { envelope, .. } => {
                    let delivered = match (&envelope, keys.get(&b.app_id)) {
                        (Some(env), Some(key)) => open(env, key, &epoch_key)
                            .map_err(|e| HarnessError::Protocol(e.to_string()))?
                            .fields(),
                        _ => ScopeSet::empty(),
                    };
                    ("GRANTED".to_owned(), delivered, envelope)
                }
                Message::Error(e) => (outcome_name(e.code), ScopeSet::empty(), None),
                other => return Err(HarnessError::Protocol(format!("{other:?}"))),
            };
            let allowed = gw
                .tier(&b.app_id)
                .ok()
                .and_then(|t| enforce_cse(t, b.context, b.requested_scopes).ok());

            match b.misbehavior {
                Misbehavior::Replay => {
                    let tx = TransactionInfo {
                        context: b.context,
                        requested: b.requested_scopes,
                    };
                    for token in gw.take_captured_tokens() {
                        clock.advance(1);
                        tally.replay_attempts += 1;
                        match gw.present_token(&token, tx, &format!("{txid}-replay")) {
                            Err(e) if e.code() == ErrorCode::ReplayDetected => {
                                tally.replay_rejections += 1
                            }
                            Err(_) => {}
                            Ok(f) => {
                                tally.replay_fields +=
                                    f.authorized_scopes.difference(f.absent_scopes).len() as u64
                            }
                        }
                    }
                }
                Misbehavior::Eavesdrop => {
                    if let Some(env) = &envelope {
                        tally.eavesdrop_attempts += 1;
                        let eve = AppKeyPair::generate(&mut rng);
                        if let Ok(p) = open(env, &eve, &epoch_key) {
                            tally.eavesdropped_fields += p.len() as u64;
                        }
                    }
                }
                _ => {}
            }
            tally.transactions.push(TransactionRecord {
                trial,
                app_id: b.app_id.clone(),
                context: b.context,
                requested: b.requested_scopes,
                outcome,
                delivered,
                allowed,
            });
        }
    }
    let ledger = gw
        .ledger_entries()
        .iter()
        .map(|e| e.outcome.to_string())
        .collect();
    let verified = gw.verify_ledger();
    drop(client);
    handle.shutdown();
    Ok(tally.finish(
        script,
        Target::Udss,
        seed,
        degraded,
        Some((ledger, verified)),
    ))
}

/// OAuth-style passthrough: every requested field on consent, bearer tokens
/// that can be replayed, plaintext on the bus.
pub fn run_baseline(script: &ScenarioScript, seed: u64) -> ScenarioReport {
    let profile = sentinel_profile().fields();
    let agent = PolicyAgent::new(script.consent_policy);
    let mut tally = Tally::default();
    for trial in 0..script.trials {
        for b in &script.app_behaviors {
            let approved = agent.next();
            let delivered = if approved {
                b.requested_scopes.intersection(profile)
            } else {
                ScopeSet::empty()
            };
            if approved {
                match b.misbehavior {
                    Misbehavior::Replay => {
                        tally.replay_attempts += 1;
                        tally.replay_fields += delivered.len() as u64;
                    }
                    Misbehavior::Eavesdrop => {
                        tally.eavesdrop_attempts += 1;
                        tally.eavesdropped_fields += delivered.len() as u64;
                    }
                    _ => {}
                }
            }
            tally.transactions.push(TransactionRecord {
                trial,
                app_id: b.app_id.clone(),
                context: b.context,
                requested: b.requested_scopes,
                outcome: if approved {
                    "GRANTED".into()
                } else {
                    "DENIED".into()
                },
                delivered,
                allowed: None,
            });
        }
    }
    tally.finish(script, Target::Baseline, seed, false, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::builtin;
    use num_rational::Ratio;

    #[test]
    fn t1_against_both_targets() {
        let s = builtin("signin-overreach").unwrap();
        let u = run_udss(&s, 1).unwrap();
        assert_eq!(u.exposure.mean_fields_exposed, Ratio::from_integer(1));
        assert!(u
            .transactions
            .iter()
            .all(|t| t.delivered == ScopeSet::from([udss_core::PiiField::Email])));
        let b = run_baseline(&s, 1);
        assert_eq!(b.exposure.mean_fields_exposed, Ratio::from_integer(5));
    }

    #[test]
    fn deny_all_exposes_nothing() {
        let mut s = builtin("signin-overreach").unwrap().with_trials(3);
        s.consent_policy = ConsentPolicy::DenyAll;
        let u = run_udss(&s, 2).unwrap();
        assert_eq!(u.exposure.mean_fields_exposed, Ratio::from_integer(0));
        assert!(u.transactions.iter().all(|t| t.outcome == "DENIED"));
        assert_eq!(u.ledger_outcomes, vec!["DENIED"; 3]);
    }

    #[test]
    fn approve_first_n_over_the_mix() {
        let mut s = builtin("signup-mix").unwrap();
        s.consent_policy = ConsentPolicy::ApproveFirstN(4);
        let u = run_udss(&s, 3).unwrap();
        // oracle: four Standard apps approved at 2 fields each
        assert_eq!(u.exposure.mean_fields_exposed, Ratio::new(8, 10));
    }

    #[test]
    fn unregistered_app_is_4001_with_no_exposure() {
        let mut s = builtin("signin-overreach").unwrap().with_trials(2);
        s.app_behaviors[0].app_id = "stranger".into();
        let u = run_udss(&s, 4).unwrap();
        assert!(u.transactions.iter().all(|t| t.outcome == "ERROR_4001"));
        assert_eq!(u.exposure.mean_fields_exposed, Ratio::from_integer(0));
    }
}
