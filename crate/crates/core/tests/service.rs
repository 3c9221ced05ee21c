use std::path::PathBuf;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use tempfile::TempDir;

use udss_core::clock::ManualClock;
use udss_core::envelope::open;
use udss_core::keys::{AppKeyPair, SignerKey};
use udss_core::ledger::{parse_ndjson, verify_chain, Outcome};
use udss_core::manifest::{ManifestEntry, ManifestIssuer};
use udss_core::pim::UserProfile;
use udss_core::wire::{
    codec, AppClient, ClientError, ConsentMode, DecisionValue, Message, OperatorClient, Service,
    ServiceHandle,
};
use udss_core::{AccessTier, ApproveAll, ErrorCode, Gateway, PiiField, RequestContext, ScopeSet};

struct Rig {
    handle: ServiceHandle,
    socket: PathBuf,
    _dir: TempDir,
    clock: ManualClock,
    std_key: AppKeyPair,
    prem_key: AppKeyPair,
}

fn sentinel(f: PiiField) -> String {
    format!("SENTINEL~{}~7f3a", f.as_str())
}

fn rig(mode: ConsentMode) -> Rig {
    let mut rng = ChaCha20Rng::seed_from_u64(2024);
    let std_key = AppKeyPair::generate(&mut rng);
    let prem_key = AppKeyPair::generate(&mut rng);
    let mut issuer = ManifestIssuer::new(SignerKey::generate(&mut rng), None);
    let manifest = issuer
        .provision(
            vec![
                ManifestEntry::new("std.app", AccessTier::Standard, std_key.public(), b"std"),
                ManifestEntry::new("prem.app", AccessTier::Premium, prem_key.public(), b"prem"),
            ],
            1,
            0,
        )
        .unwrap();
    let clock = ManualClock::new(1_000);
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
        profile.set(f, sentinel(f)).unwrap();
    }
    gw.set_profile(profile).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let socket = dir.path().join("udss.sock");
    let handle = Service::new(Arc::new(gw), mode)
        .with_consent_wait(Duration::from_secs(5))
        .serve(&socket)
        .unwrap();
    Rig {
        _dir: dir,
        socket,
        handle,
        clock,
        std_key,
        prem_key,
    }
}

fn secret(r: &Rig) -> String {
    std::fs::read_to_string(r.handle.secret_path()).unwrap()
}

fn error_code(m: &Message) -> Option<u16> {
    match m {
        Message::Error(e) => Some(e.code),
        _ => None,
    }
}

const FIVE: [&str; 5] = ["email", "firstName", "lastName", "street", "dateOfBirth"];

#[test]
fn scripted_sign_in_over_socket() {
    let r = rig(ConsentMode::Scripted(Arc::new(ApproveAll)));
    let mut app = AppClient::connect(&r.socket).unwrap();
    let key = app.gateway_key().unwrap();
    let reply = app
        .request("std.app", RequestContext::SignIn, &FIVE, "tx-1")
        .unwrap();
    let Message::IdentityFulfillment {
        transaction_id,
        envelope: Some(env),
    } = reply
    else {
        panic!("expected fulfillment, got {reply:?}");
    };
    assert_eq!(transaction_id, "tx-1");
    let payload = open(&env, &r.std_key, &key).unwrap();
    assert_eq!(payload.fields(), ScopeSet::from([PiiField::Email]));
    // the other app's key cannot open it
    assert!(open(&env, &r.prem_key, &key).is_err());
}

#[test]
fn secret_file_is_owner_only() {
    use std::os::unix::fs::PermissionsExt;
    let r = rig(ConsentMode::Operator);
    let mode = std::fs::metadata(r.handle.secret_path())
        .unwrap()
        .permissions()
        .mode();
    assert_eq!(mode & 0o777, 0o600);
}

#[test]
fn apps_cannot_reach_the_operator_channel() {
    let r = rig(ConsentMode::Operator);
    match OperatorClient::attach(&r.socket, "not-the-secret") {
        Err(ClientError::Rejected(e)) => assert_eq!(e.code, 4009),
        other => panic!("attach should fail, got {:?}", other.err()),
    }
    let mut app = AppClient::connect(&r.socket).unwrap();
    let forged = [
        Message::ConsentDecision {
            transaction_id: "x".into(),
            value: DecisionValue::Approved,
            decided_scopes: ScopeSet::full(),
        },
        Message::Revoke {
            app_id: "prem.app".into(),
        },
        Message::LedgerExport {},
        Message::Purge {},
    ];
    for m in &forged {
        assert_eq!(error_code(&app.call(m).unwrap()), Some(4009));
    }
    assert!(!r.handle.service().gateway().is_revoked("prem.app"));
}

#[test]
fn operator_approves_and_denies() {
    let r = rig(ConsentMode::Operator);
    let mut op = OperatorClient::attach(&r.socket, &secret(&r)).unwrap();
    let sock = r.socket.clone();
    let app = thread::spawn(move || {
        let mut app = AppClient::connect(&sock).unwrap();
        let a = app
            .request("std.app", RequestContext::SignUp, &FIVE, "t-approve")
            .unwrap();
        let b = app
            .request("std.app", RequestContext::SignIn, &["phone"], "t-deny")
            .unwrap();
        (a, b)
    });

    let ev = op.next_prompt(Duration::from_secs(5)).unwrap().unwrap();
    assert_eq!(ev.transaction_id, "t-approve");
    // sign-up from a Standard app: only the Contact field survives truncation
    assert_eq!(ev.truncated_scopes, ScopeSet::from([PiiField::Email]));
    assert_eq!(ev.deadline, 1_000 + 120);
    op.decide(
        &ev.transaction_id,
        DecisionValue::Approved,
        ev.truncated_scopes,
    )
    .unwrap();

    let ev = op.next_prompt(Duration::from_secs(5)).unwrap().unwrap();
    assert_eq!(ev.transaction_id, "t-deny");
    op.decide(
        &ev.transaction_id,
        DecisionValue::Denied,
        ev.truncated_scopes,
    )
    .unwrap();

    let (a, b) = app.join().unwrap();
    assert!(matches!(
        a,
        Message::IdentityFulfillment {
            envelope: Some(_),
            ..
        }
    ));
    assert_eq!(error_code(&b), Some(4003));

    let outcomes: Vec<_> = r
        .handle
        .service()
        .gateway()
        .ledger_entries()
        .iter()
        .map(|e| e.outcome)
        .collect();
    assert_eq!(outcomes, vec![Outcome::Granted, Outcome::Denied]);
}

#[test]
fn late_or_unknown_decisions_are_rejected() {
    let r = rig(ConsentMode::Operator);
    let mut op = OperatorClient::attach(&r.socket, &secret(&r)).unwrap();
    match op.decide("never-shown", DecisionValue::Approved, ScopeSet::empty()) {
        Err(ClientError::Rejected(e)) => assert_eq!(e.code, 4000),
        other => panic!("{other:?}"),
    }
    let sock = r.socket.clone();
    let app = thread::spawn(move || {
        AppClient::connect(&sock)
            .unwrap()
            .request("std.app", RequestContext::SignIn, &["email"], "late")
            .unwrap()
    });
    let ev = op.next_prompt(Duration::from_secs(5)).unwrap().unwrap();
    r.clock.advance(121);
    op.decide(
        &ev.transaction_id,
        DecisionValue::Approved,
        ev.truncated_scopes,
    )
    .unwrap();
    assert_eq!(error_code(&app.join().unwrap()), Some(4003));
}

#[test]
fn no_operator_means_denial() {
    let r = rig(ConsentMode::Operator);
    let mut app = AppClient::connect(&r.socket).unwrap();
    let m = app
        .request("std.app", RequestContext::SignIn, &["email"], "t")
        .unwrap();
    assert_eq!(error_code(&m), Some(4003));
}

#[test]
fn single_consent_surface() {
    let r = rig(ConsentMode::Operator);
    let first = OperatorClient::attach(&r.socket, &secret(&r)).unwrap();
    match OperatorClient::attach(&r.socket, &secret(&r)) {
        Err(ClientError::Rejected(e)) => assert_eq!(e.code, 4009),
        other => panic!("second attach accepted: {:?}", other.is_ok()),
    }
    drop(first);
    // the slot frees when the first operator disconnects
    let mut ok = false;
    for _ in 0..50 {
        if OperatorClient::attach(&r.socket, &secret(&r)).is_ok() {
            ok = true;
            break;
        }
        thread::sleep(Duration::from_millis(20));
    }
    assert!(ok);
}

#[test]
fn concurrent_apps_are_serialized() {
    let r = rig(ConsentMode::Operator);
    let mut op = OperatorClient::attach(&r.socket, &secret(&r)).unwrap();
    let apps: Vec<_> = ["std.app", "prem.app"]
        .into_iter()
        .map(|app_id| {
            let sock = r.socket.clone();
            thread::spawn(move || {
                let tx = format!("tx-{app_id}");
                let reply = AppClient::connect(&sock)
                    .unwrap()
                    .request(app_id, RequestContext::SignUp, &["email", "gender"], &tx)
                    .unwrap();
                (tx, reply)
            })
        })
        .collect();

    let mut seen = Vec::new();
    for _ in 0..2 {
        let ev = op.next_prompt(Duration::from_secs(5)).unwrap().unwrap();
        // one prompt at a time: nothing else is queued while this one is open
        assert!(op
            .next_prompt(Duration::from_millis(100))
            .unwrap()
            .is_none());
        let expected = if ev.app_id == "std.app" {
            ScopeSet::from([PiiField::Email])
        } else {
            ScopeSet::from([PiiField::Email, PiiField::Gender])
        };
        assert_eq!(ev.truncated_scopes, expected);
        assert_eq!(ev.transaction_id, format!("tx-{}", ev.app_id));
        op.decide(
            &ev.transaction_id,
            DecisionValue::Approved,
            ev.truncated_scopes,
        )
        .unwrap();
        seen.push(ev.app_id);
    }
    seen.sort();
    assert_eq!(seen, vec!["prem.app", "std.app"]);
    for h in apps {
        let (tx, reply) = h.join().unwrap();
        match reply {
            Message::IdentityFulfillment { transaction_id, .. } => assert_eq!(transaction_id, tx),
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn revocation_over_the_operator_channel() {
    let r = rig(ConsentMode::Operator);
    let mut op = OperatorClient::attach(&r.socket, &secret(&r)).unwrap();
    op.revoke("std.app").unwrap();
    let mut app = AppClient::connect(&r.socket).unwrap();
    let m = app
        .request("std.app", RequestContext::SignIn, &["email"], "t")
        .unwrap();
    assert_eq!(error_code(&m), Some(4004));
    // the revoked app never produced a prompt
    assert!(op
        .next_prompt(Duration::from_millis(100))
        .unwrap()
        .is_none());
    match op.revoke("nobody") {
        Err(ClientError::Rejected(e)) => assert_eq!(e.code, 4001),
        other => panic!("{other:?}"),
    }
    op.re_consent("std.app").unwrap();

    let ndjson = op.export_ledger().unwrap();
    let entries = parse_ndjson(&ndjson).unwrap();
    assert!(verify_chain(&entries));
    let outcomes: Vec<_> = entries.iter().map(|e| e.outcome).collect();
    assert_eq!(
        outcomes,
        vec![Outcome::Revoked, Outcome::Error(4004), Outcome::ReConsented]
    );
    assert_eq!(op.verify_ledger().unwrap(), (true, 3));
    for f in PiiField::ALL {
        assert!(!ndjson.contains(&sentinel(f)));
    }
}

#[test]
fn wrong_case_scope_is_a_scope_violation() {
    let r = rig(ConsentMode::Scripted(Arc::new(ApproveAll)));
    let mut app = AppClient::connect(&r.socket).unwrap();
    let m = app
        .request("std.app", RequestContext::SignIn, &["Email"], "tx-case")
        .unwrap();
    match m {
        Message::Error(e) => {
            assert_eq!(e.error_code(), Some(ErrorCode::ScopeViolation));
            assert_eq!(e.transaction_id.as_deref(), Some("tx-case"));
        }
        other => panic!("{other:?}"),
    }
    let dup = app
        .request(
            "std.app",
            RequestContext::SignIn,
            &["email", "email"],
            "tx-dup",
        )
        .unwrap();
    assert_eq!(error_code(&dup), Some(4002));
    assert_eq!(r.handle.service().gateway().ledger_len(), 2);
}

#[test]
fn garbage_and_oversize_frames() {
    let r = rig(ConsentMode::Scripted(Arc::new(ApproveAll)));
    let mut app = AppClient::connect(&r.socket).unwrap();
    let mut junk = 5u32.to_be_bytes().to_vec();
    junk.extend_from_slice(b"\xff{}\x00x");
    assert_eq!(error_code(&app.call_raw(&junk).unwrap()), Some(4000));
    // connection survives a malformed body
    assert!(app.gateway_key().is_ok());

    let huge = 1_000_000_000u32.to_be_bytes();
    assert_eq!(error_code(&app.call_raw(&huge).unwrap()), Some(4000));
    assert!(app.gateway_key().is_err());
}

#[test]
fn full_sign_up_frame_size() {
    let r = rig(ConsentMode::Scripted(Arc::new(ApproveAll)));
    let all: Vec<&str> = PiiField::ALL.iter().map(|f| f.as_str()).collect();
    let reply = AppClient::connect(&r.socket)
        .unwrap()
        .request("prem.app", RequestContext::SignUp, &all, "t1")
        .unwrap();
    let frame = codec::encode(&reply);
    let Message::IdentityFulfillment {
        envelope: Some(env),
        ..
    } = &reply
    else {
        panic!("{reply:?}");
    };
    assert!(env.to_bytes().len() < 1200);
    assert!(frame.len() < 1200 + 4, "frame is {} bytes", frame.len());
}
