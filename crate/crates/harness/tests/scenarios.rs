use proptest::prelude::*;
use udss_core::{AccessTier, PiiField, RequestContext, ScopeSet};
use udss_harness::scenario::{AppBehavior, AppSpec, BUILTIN};
use udss_harness::{builtin, run_baseline, run_udss, ConsentPolicy, Misbehavior, ScenarioScript};

#[test]
fn same_seed_same_report() {
    for name in BUILTIN {
        let script = builtin(name).unwrap().with_trials(3);
        let a = run_udss(&script, 42).unwrap();
        let b = run_udss(&script, 42).unwrap();
        assert_eq!(a.to_json(), b.to_json(), "{name}");
        assert_eq!(run_baseline(&script, 42), run_baseline(&script, 42));
    }
}

#[test]
fn udss_never_exposes_more_than_baseline() {
    for name in BUILTIN {
        let script = builtin(name).unwrap();
        let u = run_udss(&script, 9).unwrap();
        let b = run_baseline(&script, 9);
        assert!(
            u.exposure.mean_fields_exposed <= b.exposure.mean_fields_exposed,
            "{name}"
        );
        assert!(u.replay_fields <= b.replay_fields, "{name}");
        assert!(u.eavesdropped_fields <= b.eavesdropped_fields, "{name}");
    }
}

#[test]
fn adversarial_builtins_leak_nothing_through_udss() {
    let replay = run_udss(&builtin("replay").unwrap(), 3).unwrap();
    assert_eq!(replay.replay_attempts, 20);
    assert_eq!(replay.replay_rejections, 20);
    assert_eq!(replay.replay_fields, 0);

    let eve = run_udss(&builtin("eavesdrop").unwrap(), 3).unwrap();
    assert_eq!(eve.eavesdrop_attempts, 10);
    assert_eq!(eve.eavesdropped_fields, 0);

    let tamper = run_udss(&builtin("manifest-tamper").unwrap(), 3).unwrap();
    assert!(tamper.manifest_degraded);
    assert!(tamper.transactions.iter().all(|t| t.delivered.len() == 2));
    assert!(tamper
        .ledger_outcomes
        .iter()
        .any(|o| o == "MANIFEST_DEGRADED"));
}

fn arb_scopes() -> impl Strategy<Value = ScopeSet> {
    (0u16..1 << 10).prop_map(ScopeSet::from_bits_truncate)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    // every delivery is inside the scope-enforcement result for the app's
    // effective tier, and the chain verifies afterwards
    #[test]
    fn enforcement_is_total(
        reqs in prop::collection::vec((arb_scopes(), any::<bool>(), any::<bool>(), 0usize..3), 1..6),
        approve in 0usize..8,
        seed in any::<u64>(),
    ) {
        let apps = vec![
            AppSpec { app_id: "std".into(), tier: AccessTier::Standard },
            AppSpec { app_id: "prem".into(), tier: AccessTier::Premium },
        ];
        let behaviors = reqs
            .iter()
            .map(|(scopes, sign_in, over, app)| AppBehavior {
                app_id: ["std", "prem", "ghost"][*app].into(),
                context: if *sign_in { RequestContext::SignIn } else { RequestContext::SignUp },
                requested_scopes: *scopes,
                misbehavior: if *over { Misbehavior::OverRequest } else { Misbehavior::None },
            })
            .collect();
        let script = ScenarioScript {
            name: "prop".into(),
            apps,
            app_behaviors: behaviors,
            consent_policy: ConsentPolicy::ApproveFirstN(approve),
            trials: 2,
        };
        let r = run_udss(&script, seed).unwrap();
        prop_assert_eq!(r.enforcement_violations, 0);
        prop_assert_eq!(r.ledger_verified, Some(true));
        prop_assert_eq!(r.ledger_outcomes.len(), r.transactions.len());
        for t in &r.transactions {
            match t.allowed {
                Some(allowed) => prop_assert!(t.delivered.is_subset(allowed)),
                None => prop_assert!(t.delivered.is_empty()),
            }
            if t.context == RequestContext::SignIn {
                prop_assert!(t.delivered.len() <= 1);
            }
            if t.app_id == "std" {
                prop_assert!(t.delivered.is_subset(ScopeSet::from([PiiField::Email, PiiField::Phone])));
            }
        }
    }
}
