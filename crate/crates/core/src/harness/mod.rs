//! Scripted end-to-end scenarios over a file-backed chain and a storage node
//! reached through a local TCP socket.
//!
//! A scenario is a TOML document: stream parameters plus a list of steps,
//! each with its expected outcome. Running one yields a per-step report.
//! Alongside the steps, two access-control replicas are maintained (one
//! applying blocks incrementally, one rebuilt from genesis) and compared at
//! every block height.

mod run;

use std::fmt;

use serde::Deserialize;

pub use run::{run_scenario, InProcessNode, LaunchedNode, NodeLauncher, RunOptions};

/// Scenarios shipped with the crate, as `(name, toml)`.
pub const BUILTIN: &[(&str, &str)] = &[
    ("fig3", include_str!("../../scenarios/fig3.toml")),
    ("revoke", include_str!("../../scenarios/revoke.toml")),
    ("immutability", include_str!("../../scenarios/immutability.toml")),
];

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub stream: StreamSpec,
    #[serde(default = "default_records_per_epoch")]
    pub records_per_epoch: usize,
    pub steps: Vec<Step>,
}

fn default_records_per_epoch() -> usize {
    4
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    #[serde(default)]
    pub t0_ms: i64,
    pub delta_ms: i64,
    pub tree_depth: u8,
    pub chain_length: u64,
    #[serde(default = "default_grace")]
    pub grace_period: u64,
}

fn default_grace() -> u64 {
    4
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self { t0_ms: 0, delta_ms: 3_600_000, tree_depth: 10, chain_length: 1024, grace_period: default_grace() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Expect {
    Ok,
    Unauthorized,
    LockboxGeneration,
    MissingLockbox,
    Tampered,
}

impl fmt::Display for Expect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Expect::Ok => "ok",
            Expect::Unauthorized => "unauthorized",
            Expect::LockboxGeneration => "lockbox-generation",
            Expect::MissingLockbox => "missing-lockbox",
            Expect::Tampered => "tampered",
        };
        f.write_str(s)
    }
}

/// Epoch lists use the `0..3,6..7` syntax.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "action", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Step {
    /// Seal, store and publish lockboxes for the given epochs.
    Produce { epochs: String },
    Grant {
        principal: String,
        #[serde(default)]
        epochs: Option<String>,
        #[serde(default)]
        subscribe_from: Option<u64>,
    },
    /// Remove every grant of the principal and rotate the distribution key.
    Revoke { principal: String },
    /// Fetch and decrypt; on success the plaintext must equal what was produced.
    Consume { principal: String, epochs: String, expect: Expect },
    /// Check epochs against both the replica's policy and the node.
    Policy {
        principal: String,
        #[serde(default)]
        allow: Option<String>,
        #[serde(default)]
        deny: Option<String>,
    },
    /// Try to open a lockbox with the principal's last known key material,
    /// bypassing node authorization.
    OpenLockbox { principal: String, epoch: u64, expect: Expect },
    /// Number of ACL entries the principal's view key finds.
    Audit { principal: String, grants: usize },
    Anchor { epoch: u64 },
    /// Replace a stored chunk with a validly signed rewrite.
    Tamper { epoch: u64 },
    /// Walk backlinks from the latest anchor to `target`.
    VerifyLineage { target: u64, expect: Expect },
}

impl Step {
    pub fn action(&self) -> &'static str {
        match self {
            Step::Produce { .. } => "produce",
            Step::Grant { .. } => "grant",
            Step::Revoke { .. } => "revoke",
            Step::Consume { .. } => "consume",
            Step::Policy { .. } => "policy",
            Step::OpenLockbox { .. } => "open-lockbox",
            Step::Audit { .. } => "audit",
            Step::Anchor { .. } => "anchor",
            Step::Tamper { .. } => "tamper",
            Step::VerifyLineage { .. } => "verify-lineage",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("unknown scenario {0:?}")]
    Unknown(String),
    #[error("invalid scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("scenario setup failed: {0}")]
    Setup(String),
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        Ok(toml::from_str(text)?)
    }

    pub fn builtin(name: &str) -> Result<Self, ScenarioError> {
        let (_, text) = BUILTIN.iter().find(|(n, _)| *n == name).ok_or_else(|| ScenarioError::Unknown(name.into()))?;
        Self::from_toml(text)
    }
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub index: usize,
    pub action: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub steps: Vec<StepReport>,
    /// Block heights at which both replicas were compared.
    pub heights_checked: u64,
    /// First height at which the replicas diverged, with both dumps.
    pub replica_divergence: Option<String>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.replica_divergence.is_none() && self.steps.iter().all(|s| s.passed)
    }
}

impl fmt::Display for ScenarioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario {} (seed {})", self.name, self.seed)?;
        for s in &self.steps {
            let mark = if s.passed { "pass" } else { "FAIL" };
            writeln!(f, "  [{mark}] {:>2} {:<15} {}", s.index, s.action, s.detail)?;
        }
        match &self.replica_divergence {
            None => writeln!(f, "  replicas identical at {} heights", self.heights_checked)?,
            Some(d) => writeln!(f, "  replicas DIVERGED: {d}")?,
        }
        write!(f, "{}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse() {
        for (name, _) in BUILTIN {
            let s = Scenario::builtin(name).unwrap();
            assert_eq!(s.name, *name);
            assert!(!s.steps.is_empty());
        }
        assert!(matches!(Scenario::builtin("nope"), Err(ScenarioError::Unknown(_))));
        let bad = "name = \"x\"\n[[steps]]\naction = \"fly\"\n";
        assert!(Scenario::from_toml(bad).is_err());
    }

    #[test]
    fn builtin_scenarios_pass() {
        for (name, _) in BUILTIN {
            let report = run_scenario(&Scenario::builtin(name).unwrap(), &RunOptions::new(7)).unwrap();
            println!("{report}");
            assert!(report.passed(), "{report}");
            assert!(report.heights_checked > 0);
        }
    }
}
