//! Two blocks of nodes whose cross-block messages arrive late. Each block
//! freezes its registry before hearing from the other, so it decides alone.
//! This is an exhibit of what goes wrong without synchrony; it asserts nothing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::model::{NodeId, Value};
use crate::sim::consensus::execute;
use crate::sim::engine::TraceRecord;
use crate::sim::scenario::{DelaySpec, NodeSpec, Protocol, Scenario};
use crate::sim::verdict::{Metrics, RunOutcome, Verdict};
use crate::sim::SimError;

pub const BLOCK_A: &str = "A";
pub const BLOCK_B: &str = "B";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub block_size: usize,
    pub cross_delay: u64,
    pub rounds: u64,
    /// Decision of every node, per block.
    pub decisions: BTreeMap<String, BTreeMap<NodeId, Option<Value>>>,
    pub disagreement: bool,
}

/// Block A (inputs 1) has ids `1..=k`, block B (inputs 0) has `101..=100+k`.
pub fn partition_scenario(block_size: usize, cross_delay: u64) -> Scenario {
    let mut nodes = Vec::new();
    for i in 0..block_size as u64 {
        nodes.push(NodeSpec { block: Some(BLOCK_A.into()), ..NodeSpec::correct(1 + i).input(1) });
    }
    for i in 0..block_size as u64 {
        nodes.push(NodeSpec { block: Some(BLOCK_B.into()), ..NodeSpec::correct(101 + i).input(0) });
    }
    let mut s = Scenario::new(Protocol::PartitionDemo, nodes);
    s.name = Some(format!("partition-{block_size}-delay-{cross_delay}"));
    s.delay = Some(DelaySpec { cross_block: cross_delay });
    s
}

pub fn run_partition_demo(block_size: usize, cross_delay: u64) -> Result<PartitionReport, SimError> {
    let s = partition_scenario(block_size, cross_delay);
    s.validate()?;
    let (report, _, _) = demo(&s, false)?;
    Ok(report)
}

fn demo(s: &Scenario, trace: bool) -> Result<(PartitionReport, u64, Option<Vec<TraceRecord>>), SimError> {
    let blocks: BTreeMap<NodeId, String> =
        s.nodes.iter().map(|n| (n.id, n.block.clone().expect("validated"))).collect();
    let cross = s.delay.as_ref().expect("validated").cross_block.max(1);
    let b2 = blocks.clone();
    let delay = Box::new(move |a: NodeId, b: NodeId, _| if b2[&a] == b2[&b] { 1 } else { cross });
    let (correct, rounds, messages, t) = execute(s, trace, Some(delay))?;
    let mut decisions: BTreeMap<String, BTreeMap<NodeId, Option<Value>>> = BTreeMap::new();
    for c in &correct {
        decisions.entry(blocks[&c.id].clone()).or_default().insert(c.id, c.decision().map(|d| d.0));
    }
    let distinct: std::collections::BTreeSet<Value> =
        decisions.values().flat_map(|m| m.values().flatten().copied()).collect();
    let report = PartitionReport {
        block_size: s.nodes.iter().filter(|n| n.block.as_deref() == Some(BLOCK_A)).count(),
        cross_delay: cross,
        rounds,
        decisions,
        disagreement: distinct.len() > 1,
    };
    Ok((report, messages, t))
}

pub(crate) fn run(s: &Scenario, trace: bool) -> Result<(RunOutcome, Option<Vec<TraceRecord>>), SimError> {
    let (report, messages, t) = demo(s, trace)?;
    let mut outputs = BTreeMap::new();
    let mut termination = BTreeMap::new();
    for (block, m) in &report.decisions {
        for (id, d) in m {
            outputs.insert(*id, json!({"block": block, "decision": d}));
            termination.insert(*id, None);
        }
    }
    let summary: Vec<String> = report
        .decisions
        .iter()
        .map(|(b, m)| {
            let vals: std::collections::BTreeSet<String> =
                m.values().map(|d| d.map_or("none".into(), |v| v.to_string())).collect();
            format!("block {b} decided {}", vals.into_iter().collect::<Vec<_>>().join("/"))
        })
        .collect();
    let mut notes = summary;
    notes.push(if report.disagreement { "disagreement".into() } else { "no disagreement".into() });
    let verdict = Verdict {
        protocol: s.protocol,
        properties: vec![],
        metrics: Metrics { rounds: report.rounds, messages, termination },
    };
    Ok((RunOutcome { verdict, outputs, notes }, t))
}
