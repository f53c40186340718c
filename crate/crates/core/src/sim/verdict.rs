use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::NodeId;
use crate::sim::scenario::{Protocol, Scenario};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_violation_round: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<String>,
    /// How many individual facts were checked.
    pub checked: u64,
}

/// Accumulates one property over a run, keeping the earliest violation.
#[derive(Clone, Debug)]
pub struct Check {
    name: &'static str,
    checked: u64,
    violation: Option<(u64, String)>,
}

impl Check {
    pub fn new(name: &'static str) -> Self {
        Check { name, checked: 0, violation: None }
    }

    pub fn observe(&mut self, round: u64, ok: bool, witness: impl FnOnce() -> String) {
        self.checked += 1;
        if !ok && self.violation.as_ref().is_none_or(|(r, _)| round < *r) {
            self.violation = Some((round, witness()));
        }
    }

    pub fn failed(&self) -> bool {
        self.violation.is_some()
    }

    pub fn finish(self) -> PropertyResult {
        PropertyResult {
            name: self.name.to_string(),
            passed: self.violation.is_none(),
            first_violation_round: self.violation.as_ref().map(|(r, _)| *r),
            witness: self.violation.map(|(_, w)| w),
            checked: self.checked,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metrics {
    pub rounds: u64,
    pub messages: u64,
    /// Round each node terminated (accepted, decided, finished), if it did.
    pub termination: BTreeMap<NodeId, Option<u64>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub protocol: Protocol,
    pub properties: Vec<PropertyResult>,
    pub metrics: Metrics,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(|p| p.passed)
    }

    pub fn property(&self, name: &str) -> Option<&PropertyResult> {
        self.properties.iter().find(|p| p.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &PropertyResult> {
        self.properties.iter().filter(|p| !p.passed)
    }
}

/// Property names each protocol's verdict must list, in order.
pub fn property_names(p: Protocol) -> &'static [&'static str] {
    match p {
        Protocol::Rb => &[
            "correctness",
            "unforgeability",
            "relay",
            "echo_support",
            "quorum_spread",
            "registry_monotone",
            "nv_bounded",
        ],
        Protocol::Rotor => &[
            "candidate_relay",
            "good_round",
            "termination_bound",
            "correct_ids_first",
            "nv_bounded",
        ],
        Protocol::Consensus => &[
            "validity",
            "agreement",
            "termination",
            "no_conflicting_quorums",
            "good_round_convergence",
            "termination_spread",
            "round_bound",
        ],
        Protocol::Approx => &["containment", "median_survival", "halving"],
        Protocol::Parallel => &["validity", "agreement", "termination", "no_phantom_output"],
        Protocol::Dynamic => &["chain_prefix", "chain_growth", "round_agreement", "finality_soundness"],
        Protocol::PartitionDemo => &[],
    }
}

/// Everything a run produced besides the trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub verdict: Verdict,
    pub outputs: BTreeMap<NodeId, serde_json::Value>,
    /// Observations that are reported but not asserted.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool: String,
    pub version: String,
    pub scenario: Scenario,
    pub seed: u64,
    pub passed: bool,
    pub expect_fail: bool,
    /// `passed`, inverted when the scenario expects a failure.
    pub ok: bool,
    pub verdict: Verdict,
    pub outputs: BTreeMap<NodeId, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    /// Only filled when timing is requested, so reports stay reproducible.
    pub wall_time_ms: Option<u64>,
}

impl RunReport {
    pub fn new(scenario: &Scenario, outcome: RunOutcome, wall_time_ms: Option<u64>) -> Self {
        let passed = outcome.verdict.passed();
        RunReport {
            tool: "idonly".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            scenario: scenario.clone(),
            seed: scenario.seed,
            passed,
            expect_fail: scenario.expect_fail,
            ok: passed != scenario.expect_fail,
            verdict: outcome.verdict,
            outputs: outcome.outputs,
            notes: outcome.notes,
            wall_time_ms,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
