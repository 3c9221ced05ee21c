//! Overhead benchmarks on wall-clock time.
//!
//! Four stages per iteration: scope enforcement alone, token issue plus
//! vault extraction, envelope seal plus open, and a full request over the
//! socket with instant scripted consent.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use udss_core::clock::SystemClock;
use udss_core::envelope::{open, seal, Payload};
use udss_core::keys::{AppKeyPair, KeyRing, SignerKey};
use udss_core::manifest::{provision_manifest, ManifestEntry};
use udss_core::pim::{Pim, TransactionInfo};
use udss_core::schema::{enforce_cse, MAX_VALUE_LEN};
use udss_core::token::ScopeToken;
use udss_core::wire::{AppClient, ConsentMode, Message, Service};
use udss_core::{AccessTier, ApproveAll, Gateway, PiiField, RequestContext, ScopeSet};

use crate::scenario::OVERREACH_REQUEST;
use crate::{sentinel_profile, HarnessError, SIM_EPOCH};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct BenchRow {
    pub iteration: usize,
    pub cse_ms: f64,
    pub token_extract_ms: f64,
    pub seal_open_ms: f64,
    pub end_to_end_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
}

impl Summary {
    /// Sample standard deviation; zero for fewer than two samples.
    pub fn of(xs: &[f64]) -> Summary {
        if xs.is_empty() {
            return Summary { mean: 0.0, sd: 0.0 };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Summary { mean, sd }
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub cse: Summary,
    pub token_extract: Summary,
    pub seal_open: Summary,
    pub end_to_end: Summary,
}

impl BenchReport {
    fn from_rows(rows: Vec<BenchRow>) -> Self {
        let col = |f: fn(&BenchRow) -> f64| Summary::of(&rows.iter().map(f).collect::<Vec<_>>());
        BenchReport {
            cse: col(|r| r.cse_ms),
            token_extract: col(|r| r.token_extract_ms),
            seal_open: col(|r| r.seal_open_ms),
            end_to_end: col(|r| r.end_to_end_ms),
            rows,
        }
    }

    /// Header plus exactly one row per iteration.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("csv is utf-8")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} iterations, milliseconds", self.rows.len());
        let _ = writeln!(out, "{:<24} {:>10} {:>10}", "stage", "mean", "sd");
        for (name, s) in [
            ("scope enforcement", self.cse),
            ("token + extract", self.token_extract),
            ("seal + open", self.seal_open),
            ("end to end", self.end_to_end),
        ] {
            let _ = writeln!(out, "{:<24} {:>10.4} {:>10.4}", name, s.mean, s.sd);
        }
        out
    }
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Largest payload the schema allows: all ten fields at the value cap.
pub fn full_payload() -> Payload {
    let mut p = Payload::new();
    for f in PiiField::ALL {
        let v: String = f.as_str().chars().cycle().take(MAX_VALUE_LEN).collect();
        p.insert(f, v).expect("value at the cap");
    }
    p
}

pub fn bench_overhead(iterations: usize, seed: u64) -> Result<BenchReport, HarnessError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let app_key = AppKeyPair::generate(&mut rng);
    // a 20-byte id: the longest the manifest accepts
    let app_id = "bench.app.0000000000";
    let entry = ManifestEntry::new(app_id, AccessTier::Premium, app_key.public(), b"bench");
    let ring = KeyRing::provision(&mut rng, SIM_EPOCH);
    let epoch_key = ring.current().public();
    let payload = full_payload();

    let mut pim = Pim::in_memory();
    pim.set_profile(sentinel_profile())?;

    let root = SignerKey::generate(&mut rng);
    let manifest = provision_manifest(vec![entry.clone()], 1, SIM_EPOCH, &root, None)?;
    let gateway = Gateway::boot_from_bytes(
        &manifest.to_canonical_bytes(),
        &root.public(),
        None,
        Arc::new(SystemClock),
        Box::new(ChaCha20Rng::seed_from_u64(seed ^ 1)),
    )?;
    gateway.set_profile(sentinel_profile())?;
    let dir = tempfile::tempdir()?;
    let handle = Service::new(
        Arc::new(gateway),
        ConsentMode::Scripted(Arc::new(ApproveAll)),
    )
    .serve(&dir.path().join("bench.sock"))?;
    let mut client = AppClient::connect(handle.socket_path())?;
    let served_key = client.gateway_key()?;
    let all: Vec<&str> = PiiField::ALL.iter().map(|f| f.as_str()).collect();
    let request: ScopeSet = OVERREACH_REQUEST.into_iter().collect();

    let mut rows = Vec::with_capacity(iterations);
    for iteration in 0..iterations {
        let t = Instant::now();
        let cse = enforce_cse(AccessTier::Standard, RequestContext::SignIn, request);
        let cse_ms = ms(t);
        std::hint::black_box(cse.ok());

        let t = Instant::now();
        let nonce = pim.next_nonce(app_id)?;
        let token = ScopeToken::sign(app_id, ScopeSet::full(), nonce, SIM_EPOCH, ring.current());
        let tx = TransactionInfo {
            context: RequestContext::SignUp,
            requested: ScopeSet::full(),
        };
        let extracted = pim.extract(&token, SIM_EPOCH, &epoch_key, tx)?;
        let token_extract_ms = ms(t);
        std::hint::black_box(extracted);

        let t = Instant::now();
        let env = seal(&payload, &entry, ring.current(), &mut rng)
            .map_err(|e| HarnessError::Protocol(e.to_string()))?;
        let opened =
            open(&env, &app_key, &epoch_key).map_err(|e| HarnessError::Protocol(e.to_string()))?;
        let seal_open_ms = ms(t);
        std::hint::black_box(opened);

        let t = Instant::now();
        let reply = client.request(app_id, RequestContext::SignUp, &all, "bench")?;
        match reply {
            Message::IdentityFulfillment {
                envelope: Some(env),
                ..
            } => {
                open(&env, &app_key, &served_key)
                    .map_err(|e| HarnessError::Protocol(e.to_string()))?;
            }
            other => return Err(HarnessError::Protocol(format!("{other:?}"))),
        }
        let end_to_end_ms = ms(t);

        rows.push(BenchRow {
            iteration,
            cse_ms,
            token_extract_ms,
            seal_open_ms,
            end_to_end_ms,
        });
    }
    drop(client);
    handle.shutdown();
    Ok(BenchReport::from_rows(rows))
}
