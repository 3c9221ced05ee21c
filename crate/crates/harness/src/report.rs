//! Exposure metrics and report rendering.

use std::fmt::Write as _;

use num_rational::Ratio;
use serde::{Serialize, Serializer};
use udss_core::{RequestContext, ScopeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Target {
    #[serde(rename = "UDSS")]
    Udss,
    Baseline,
}

impl std::fmt::Display for Target {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Target::Udss => "UDSS",
            Target::Baseline => "Baseline",
        })
    }
}

fn ratio_str<S: Serializer>(r: &Ratio<u64>, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&r.to_string())
}

/// Fields delivered per transaction. The mean is exact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ExposureReport {
    pub workflow: RequestContext,
    pub comparator: Target,
    #[serde(serialize_with = "ratio_str")]
    pub mean_fields_exposed: Ratio<u64>,
    pub per_trial_counts: Vec<u64>,
}

impl ExposureReport {
    pub fn new(workflow: RequestContext, comparator: Target, counts: Vec<u64>) -> Self {
        let mean = if counts.is_empty() {
            Ratio::from_integer(0)
        } else {
            Ratio::new(counts.iter().sum(), counts.len() as u64)
        };
        ExposureReport {
            workflow,
            comparator,
            mean_fields_exposed: mean,
            per_trial_counts: counts,
        }
    }

    /// For display only; assertions use the exact ratio.
    pub fn mean_f64(&self) -> f64 {
        *self.mean_fields_exposed.numer() as f64 / *self.mean_fields_exposed.denom() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct TransactionRecord {
    pub trial: usize,
    pub app_id: String,
    pub context: RequestContext,
    pub requested: ScopeSet,
    pub outcome: String,
    pub delivered: ScopeSet,
    /// CSE result for the app's effective tier; `None` when the gateway
    /// must refuse (unknown app, nothing allowed). UDSS runs only.
    pub allowed: Option<ScopeSet>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ScenarioReport {
    pub scenario: String,
    pub target: Target,
    pub seed: u64,
    pub exposure: ExposureReport,
    pub transactions: Vec<TransactionRecord>,
    pub replay_attempts: usize,
    pub replay_rejections: usize,
    pub replay_fields: u64,
    pub eavesdrop_attempts: usize,
    pub eavesdropped_fields: u64,
    /// Deliveries containing a field outside the CSE result.
    pub enforcement_violations: usize,
    pub manifest_degraded: bool,
    pub ledger_outcomes: Vec<String>,
    pub ledger_verified: Option<bool>,
}

impl ScenarioReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    /// One row per transaction.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "scenario",
            "target",
            "trial",
            "appId",
            "context",
            "requested",
            "outcome",
            "delivered",
            "deliveredCount",
        ])
        .expect("in-memory write");
        for t in &self.transactions {
            w.write_record([
                self.scenario.clone(),
                self.target.to_string(),
                t.trial.to_string(),
                t.app_id.clone(),
                t.context.to_string(),
                t.requested.names().join(" "),
                t.outcome.clone(),
                t.delivered.names().join(" "),
                t.delivered.len().to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("csv is utf-8")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let e = &self.exposure;
        let _ = writeln!(
            out,
            "scenario           {} ({}, seed {})",
            self.scenario, self.target, self.seed
        );
        let _ = writeln!(out, "transactions       {}", self.transactions.len());
        let _ = writeln!(
            out,
            "mean exposure      {} = {:.2} fields",
            e.mean_fields_exposed,
            e.mean_f64()
        );
        if self.manifest_degraded {
            let _ = writeln!(
                out,
                "manifest           DEGRADED (all apps clamped to Standard)"
            );
        }
        if self.replay_attempts > 0 {
            let _ = writeln!(
                out,
                "replays            {} attempted, {} rejected, {} fields leaked",
                self.replay_attempts, self.replay_rejections, self.replay_fields
            );
        }
        if self.eavesdrop_attempts > 0 {
            let _ = writeln!(
                out,
                "eavesdropping      {} attempts, {} fields read",
                self.eavesdrop_attempts, self.eavesdropped_fields
            );
        }
        if self.target == Target::Udss {
            let _ = writeln!(out, "CSE violations     {}", self.enforcement_violations);
        }
        if let Some(ok) = self.ledger_verified {
            let _ = writeln!(
                out,
                "ledger             {} entries, chain {}",
                self.ledger_outcomes.len(),
                if ok { "verified" } else { "BROKEN" }
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<6} {:<10} {:<8} {:<12} delivered",
            "trial", "app", "context", "outcome"
        );
        for t in &self.transactions {
            let _ = writeln!(
                out,
                "{:<6} {:<10} {:<8} {:<12} {}",
                t.trial, t.app_id, t.context, t.outcome, t.delivered
            );
        }
        out
    }
}
