//! Scripted honest and adversarial apps, the OAuth-style baseline, exposure
//! metrics and overhead benchmarks.

pub mod bench;
pub mod report;
pub mod runner;
pub mod scenario;

use thiserror::Error;
use udss_core::gateway::GatewayBootError;
use udss_core::pim::UserProfile;
use udss_core::wire::{ClientError, ServeError};
use udss_core::{GatewayError, PiiField};

pub use report::{ExposureReport, ScenarioReport, Target};
pub use runner::{run_baseline, run_scenario, run_udss};
pub use scenario::{builtin, ConsentPolicy, Misbehavior, ScenarioScript};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("gateway boot: {0}")]
    Boot(#[from] GatewayBootError),
    #[error("service: {0}")]
    Serve(#[from] ServeError),
    #[error("wire: {0}")]
    Client(#[from] ClientError),
    #[error("gateway: {0}")]
    Gateway(#[from] GatewayError),
    #[error("vault: {0}")]
    Pim(#[from] udss_core::pim::PimError),
    #[error("storage: {0}")]
    Storage(#[from] udss_core::storage::StorageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("provisioning: {0}")]
    Provision(#[from] udss_core::manifest::ProvisionError),
    #[error("unexpected reply: {0}")]
    Protocol(String),
}

/// Profile value for `field`: unique, recognizable, and within the 64-byte cap.
pub fn sentinel_value(field: PiiField) -> String {
    format!("zq{}-sentinel-9d41", field.as_str())
}

/// A profile with every field set to its sentinel.
pub fn sentinel_profile() -> UserProfile {
    let mut p = UserProfile::new();
    for f in PiiField::ALL {
        p.set(f, sentinel_value(f))
            .expect("sentinels fit the value cap");
    }
    p
}

/// Scenario and benchmark clocks start here.
pub const SIM_EPOCH: u64 = 1_700_000_000;
