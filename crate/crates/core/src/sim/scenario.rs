//! Scenario files: what to run, with which nodes, against which adversary.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{NodeId, Rational, Value};
use crate::sim::adversary::{AdversarySpec, CatalogAdversary};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("scenario does not parse: {0}")]
    Parse(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError::Invalid(msg.into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Rb,
    Rotor,
    Consensus,
    Approx,
    Parallel,
    Dynamic,
    PartitionDemo,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Rb => "rb",
            Protocol::Rotor => "rotor",
            Protocol::Consensus => "consensus",
            Protocol::Approx => "approx",
            Protocol::Parallel => "parallel",
            Protocol::Dynamic => "dynamic",
            Protocol::PartitionDemo => "partition_demo",
        }
    }
}

/// A node input: an integer, or a rational written `"p/q"` (approx only).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InputValue {
    Int(i64),
    Text(String),
}

impl InputValue {
    pub fn as_value(&self) -> Result<Value, ScenarioError> {
        match self {
            InputValue::Int(v) => Ok(Value::Val(*v)),
            InputValue::Text(s) => match s.trim().parse::<i64>() {
                Ok(v) => Ok(Value::Val(v)),
                Err(_) => invalid(format!("input {s:?} is not an integer")),
            },
        }
    }

    pub fn as_rational(&self) -> Result<Rational, ScenarioError> {
        match self {
            InputValue::Int(v) => Ok(Rational::from_integer(*v as i128)),
            InputValue::Text(s) => Rational::from_str(s.trim())
                .map_err(|_| ScenarioError::Invalid(format!("input {s:?} is not a rational"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: NodeId,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub faulty: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<InputValue>,
    /// Parallel consensus input pairs `[instance, value]`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pairs: Vec<(u64, i64)>,
    /// Dynamic ordering: submit one event every loop round.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub submits: bool,
    /// Partition demo block label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<String>,
}

impl NodeSpec {
    pub fn correct(id: u64) -> Self {
        NodeSpec { id: NodeId(id), faulty: false, input: None, pairs: vec![], submits: false, block: None }
    }

    pub fn faulty(id: u64) -> Self {
        NodeSpec { faulty: true, ..NodeSpec::correct(id) }
    }

    pub fn input(mut self, v: i64) -> Self {
        self.input = Some(InputValue::Int(v));
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChurnAction {
    Join,
    Leave,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChurnSpec {
    pub round: u64,
    pub node: NodeId,
    pub action: ChurnAction,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    /// Where to write the line-delimited delivery trace.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelaySpec {
    /// Rounds a message between different blocks takes.
    pub cross_block: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub protocol: Protocol,
    pub nodes: Vec<NodeSpec>,
    #[serde(default = "silent")]
    pub adversary: AdversarySpec,
    /// Round horizon; each protocol has a default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds: Option<u64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub churn: Vec<ChurnSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputSpec>,
    /// The run is expected to violate at least one property.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub expect_fail: bool,
    /// Allow `n <= 3f` (negative controls).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub invalid_resilience: bool,
    /// Reliable broadcast sender; defaults to the first node.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sender: Option<NodeId>,
    /// Approximate agreement iterations (default 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay: Option<DelaySpec>,
}

fn silent() -> AdversarySpec {
    AdversarySpec::named("silent")
}

impl Scenario {
    pub fn new(protocol: Protocol, nodes: Vec<NodeSpec>) -> Self {
        Scenario {
            name: None,
            protocol,
            nodes,
            adversary: silent(),
            rounds: None,
            seed: 0,
            churn: vec![],
            output: None,
            expect_fail: false,
            invalid_resilience: false,
            sender: None,
            iterations: None,
            delay: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        let s: Scenario =
            serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn faulty(&self) -> BTreeSet<NodeId> {
        self.nodes.iter().filter(|n| n.faulty).map(|n| n.id).collect()
    }

    pub fn correct(&self) -> BTreeSet<NodeId> {
        self.nodes.iter().filter(|n| !n.faulty).map(|n| n.id).collect()
    }

    pub fn sender_id(&self) -> NodeId {
        self.sender.unwrap_or_else(|| self.nodes[0].id)
    }

    /// Global join round of every node (genesis nodes start in round 1).
    pub fn start_rounds(&self) -> BTreeMap<NodeId, u64> {
        let mut m: BTreeMap<NodeId, u64> = self.nodes.iter().map(|n| (n.id, 1)).collect();
        for c in &self.churn {
            if c.action == ChurnAction::Join {
                m.insert(c.node, c.round);
            }
        }
        m
    }

    pub fn leave_rounds(&self) -> BTreeMap<NodeId, u64> {
        self.churn
            .iter()
            .filter(|c| c.action == ChurnAction::Leave)
            .map(|c| (c.node, c.round))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.nodes.is_empty() {
            return invalid("no nodes");
        }
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id) {
                return invalid(format!("duplicate node id {}", n.id));
            }
        }
        if self.rounds == Some(0) {
            return invalid("rounds must be positive");
        }
        CatalogAdversary::new(&self.adversary, self.seed)?;
        let f = self.faulty().len();
        let n = self.nodes.len();
        if self.protocol != Protocol::Dynamic && n <= 3 * f && !self.invalid_resilience {
            return invalid(format!(
                "n = {n} with f = {f} violates n > 3f (set invalid_resilience for negative controls)"
            ));
        }
        if !self.churn.is_empty() && self.protocol != Protocol::Dynamic {
            return invalid("churn is only meaningful for the dynamic protocol");
        }
        if self.delay.is_some() && self.protocol != Protocol::PartitionDemo {
            return invalid("delay is only meaningful for partition_demo");
        }
        if self.iterations.is_some() && self.protocol != Protocol::Approx {
            return invalid("iterations is only meaningful for approx");
        }
        if self.sender.is_some() && self.protocol != Protocol::Rb {
            return invalid("sender is only meaningful for rb");
        }
        match self.protocol {
            Protocol::Rb => {
                let s = self.sender_id();
                let Some(spec) = self.nodes.iter().find(|n| n.id == s) else {
                    return invalid(format!("sender {s} is not a node"));
                };
                match &spec.input {
                    Some(v) => {
                        v.as_value()?;
                    }
                    None => return invalid(format!("sender {s} has no input")),
                }
            }
            Protocol::Rotor | Protocol::Consensus | Protocol::PartitionDemo => {
                for n in &self.nodes {
                    match &n.input {
                        Some(v) => {
                            v.as_value()?;
                        }
                        None => return invalid(format!("node {} has no input", n.id)),
                    }
                }
                if self.protocol == Protocol::PartitionDemo {
                    if self.delay.is_none() {
                        return invalid("partition_demo needs a delay");
                    }
                    if self.nodes.iter().any(|n| n.block.is_none()) {
                        return invalid("partition_demo needs a block for every node");
                    }
                }
            }
            Protocol::Approx => {
                for n in &self.nodes {
                    match &n.input {
                        Some(v) => {
                            v.as_rational()?;
                        }
                        None => return invalid(format!("node {} has no input", n.id)),
                    }
                }
                if self.iterations == Some(0) {
                    return invalid("iterations must be positive");
                }
            }
            Protocol::Parallel => {
                for n in &self.nodes {
                    let mut seen = BTreeSet::new();
                    for (id, _) in &n.pairs {
                        if !seen.insert(id) {
                            return invalid(format!("node {} lists instance {id} twice", n.id));
                        }
                    }
                }
            }
            Protocol::Dynamic => self.validate_churn()?,
        }
        Ok(())
    }

    fn validate_churn(&self) -> Result<(), ScenarioError> {
        let faulty = self.faulty();
        let known: BTreeSet<NodeId> = self.nodes.iter().map(|n| n.id).collect();
        let mut joins = BTreeMap::new();
        let mut leaves = BTreeMap::new();
        for c in &self.churn {
            if !known.contains(&c.node) {
                return invalid(format!("churn names unknown node {}", c.node));
            }
            let slot = match c.action {
                ChurnAction::Join => &mut joins,
                ChurnAction::Leave => &mut leaves,
            };
            if slot.insert(c.node, c.round).is_some() {
                return invalid(format!("node {} has two {:?} entries", c.node, c.action));
            }
            if c.round < 2 {
                return invalid("churn starts in round 2");
            }
        }
        for (node, &l) in &leaves {
            // A node can leave once it is in the loop: joiners enter it three
            // rounds after announcing themselves.
            let earliest = joins.get(node).map_or(2, |j| j + 3);
            if l < earliest {
                return invalid(format!("node {node} leaves in round {l} before it can"));
            }
        }
        let horizon = self.rounds.unwrap_or(200);
        for r in 1..=horizon {
            let present: Vec<NodeId> = known
                .iter()
                .copied()
                .filter(|u| joins.get(u).is_none_or(|&j| j <= r) && leaves.get(u).is_none_or(|&l| l > r))
                .collect();
            let f = present.iter().filter(|u| faulty.contains(u)).count();
            if present.len() <= 3 * f && !self.invalid_resilience {
                return invalid(format!(
                    "round {r}: {} nodes with {f} faulty violates n > 3f",
                    present.len()
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects_unknown_fields() {
        let ok = r#"{"protocol":"rb","nodes":[{"id":1,"input":5},{"id":2},{"id":3},{"id":4,"faulty":true}],"seed":3}"#;
        let s = Scenario::from_json(ok).unwrap();
        assert_eq!(s.adversary.name, "silent");
        assert_eq!(s.faulty(), BTreeSet::from([NodeId(4)]));
        let bad = r#"{"protocol":"rb","nodes":[{"id":1,"input":5}],"colour":1}"#;
        assert!(matches!(Scenario::from_json(bad), Err(ScenarioError::Parse(_))));
    }

    #[test]
    fn rejects_duplicates_and_resilience() {
        let dup = Scenario::new(Protocol::Consensus, vec![NodeSpec::correct(1).input(0), NodeSpec::correct(1).input(0)]);
        assert!(dup.validate().is_err());
        let weak = Scenario::new(
            Protocol::Consensus,
            vec![NodeSpec::correct(1).input(0), NodeSpec::correct(2).input(0), NodeSpec::faulty(3).input(0)],
        );
        assert!(weak.validate().is_err());
        let allowed = Scenario { invalid_resilience: true, ..weak };
        assert!(allowed.validate().is_ok());
    }

    #[test]
    fn rational_inputs() {
        assert_eq!(InputValue::Text("1/2".into()).as_rational().unwrap(), Rational::new(1, 2));
        assert_eq!(InputValue::Int(3).as_rational().unwrap(), Rational::from_integer(3));
        assert!(InputValue::Text("x".into()).as_rational().is_err());
    }

    #[test]
    fn churn_must_keep_resilience() {
        let mut nodes: Vec<NodeSpec> = (1..=4).map(NodeSpec::correct).collect();
        nodes.push(NodeSpec::faulty(5));
        let mut s = Scenario::new(Protocol::Dynamic, nodes);
        s.rounds = Some(40);
        assert!(s.validate().is_ok());
        s.churn.push(ChurnSpec { round: 10, node: NodeId(1), action: ChurnAction::Leave });
        s.churn.push(ChurnSpec { round: 10, node: NodeId(2), action: ChurnAction::Leave });
        assert!(s.validate().is_err());
    }
}
