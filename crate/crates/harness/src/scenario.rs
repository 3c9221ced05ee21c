//! Scenario scripts: which apps ask for what, how they misbehave, and how
//! the simulated user answers consent prompts.

use serde::{Deserialize, Serialize};
use udss_core::{AccessTier, PiiField, RequestContext, ScopeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Misbehavior {
    None,
    /// Asks for more than its context and tier allow.
    OverRequest,
    /// Re-presents the token captured from its own transaction.
    Replay,
    /// A third party intercepts the fulfillment and tries to read it.
    Eavesdrop,
    /// The manifest file is bit-flipped before the gateway boots.
    TamperManifest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "n")]
pub enum ConsentPolicy {
    ApproveAll,
    DenyAll,
    /// Approves the first `n` prompts of the run, denies the rest.
    ApproveFirstN(usize),
}

impl ConsentPolicy {
    pub fn approves(self, prompt_index: usize) -> bool {
        match self {
            ConsentPolicy::ApproveAll => true,
            ConsentPolicy::DenyAll => false,
            ConsentPolicy::ApproveFirstN(n) => prompt_index < n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AppSpec {
    pub app_id: String,
    pub tier: AccessTier,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AppBehavior {
    pub app_id: String,
    pub context: RequestContext,
    pub requested_scopes: ScopeSet,
    pub misbehavior: Misbehavior,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScenarioScript {
    pub name: String,
    /// Apps registered in the manifest. Behaviors may name apps outside it.
    pub apps: Vec<AppSpec>,
    pub app_behaviors: Vec<AppBehavior>,
    pub consent_policy: ConsentPolicy,
    /// Each trial runs every behavior once, in order.
    pub trials: usize,
}

impl ScenarioScript {
    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn tampers_manifest(&self) -> bool {
        self.app_behaviors
            .iter()
            .any(|b| b.misbehavior == Misbehavior::TamperManifest)
    }

    pub fn with_trials(mut self, trials: usize) -> Self {
        self.trials = trials;
        self
    }

    pub fn registered_tier(&self, app_id: &str) -> Option<AccessTier> {
        self.apps
            .iter()
            .find(|a| a.app_id == app_id)
            .map(|a| a.tier)
    }
}

use PiiField::*;

/// An over-privileged sign-in request: one Contact field plus four Premium ones.
pub const OVERREACH_REQUEST: [PiiField; 5] = [Email, FirstName, LastName, Street, DateOfBirth];
pub const MIX_STANDARD_REQUEST: [PiiField; 5] = [Email, Phone, FirstName, Street, DateOfBirth];
pub const MIX_PREMIUM_REQUEST: [PiiField; 3] = [Email, Phone, Gender];

fn app(id: &str, tier: AccessTier) -> AppSpec {
    AppSpec {
        app_id: id.into(),
        tier,
    }
}

fn behave(id: &str, ctx: RequestContext, scopes: &[PiiField], m: Misbehavior) -> AppBehavior {
    AppBehavior {
        app_id: id.into(),
        context: ctx,
        requested_scopes: scopes.iter().copied().collect(),
        misbehavior: m,
    }
}

/// Names accepted by [`builtin`].
pub const BUILTIN: [&str; 6] = [
    "signin-overreach",
    "signup-mix",
    "signup-premium",
    "eavesdrop",
    "replay",
    "manifest-tamper",
];

pub fn builtin(name: &str) -> Option<ScenarioScript> {
    use AccessTier::*;
    use RequestContext::*;
    let script = match name {
        "signin-overreach" => ScenarioScript {
            name: name.into(),
            apps: vec![app("overreach", Standard)],
            app_behaviors: vec![behave(
                "overreach",
                SignIn,
                &OVERREACH_REQUEST,
                Misbehavior::OverRequest,
            )],
            consent_policy: ConsentPolicy::ApproveAll,
            trials: 20,
        },
        // constructed workload: 9 Standard apps and 1 Premium app signing up
        "signup-mix" | "signup-premium" => {
            let premium_only = name == "signup-premium";
            let std_tier = if premium_only { Premium } else { Standard };
            let mut apps: Vec<_> = (1..=9)
                .map(|i| app(&format!("shop{i:02}"), std_tier))
                .collect();
            apps.push(app("partner", Premium));
            let mut behaviors: Vec<_> = (1..=9)
                .map(|i| {
                    behave(
                        &format!("shop{i:02}"),
                        SignUp,
                        &MIX_STANDARD_REQUEST,
                        Misbehavior::None,
                    )
                })
                .collect();
            behaviors.push(behave(
                "partner",
                SignUp,
                &MIX_PREMIUM_REQUEST,
                Misbehavior::None,
            ));
            ScenarioScript {
                name: name.into(),
                apps,
                app_behaviors: behaviors,
                consent_policy: ConsentPolicy::ApproveAll,
                trials: 1,
            }
        }
        "eavesdrop" => ScenarioScript {
            name: name.into(),
            apps: vec![app("mail", Standard)],
            app_behaviors: vec![behave(
                "mail",
                SignUp,
                &[Email, Phone],
                Misbehavior::Eavesdrop,
            )],
            consent_policy: ConsentPolicy::ApproveAll,
            trials: 10,
        },
        "replay" => ScenarioScript {
            name: name.into(),
            apps: vec![app("replayer", Standard)],
            app_behaviors: vec![behave(
                "replayer",
                SignIn,
                &[Email, Phone],
                Misbehavior::Replay,
            )],
            consent_policy: ConsentPolicy::ApproveAll,
            trials: 20,
        },
        "manifest-tamper" => ScenarioScript {
            name: name.into(),
            apps: vec![app("partner", Premium)],
            app_behaviors: vec![behave(
                "partner",
                SignUp,
                &PiiField::ALL,
                Misbehavior::TamperManifest,
            )],
            consent_policy: ConsentPolicy::ApproveAll,
            trials: 5,
        },
        _ => return None,
    };
    Some(script)
}
