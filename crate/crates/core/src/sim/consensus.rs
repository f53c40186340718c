use std::collections::{BTreeMap, BTreeSet};

use serde_json::json;

use crate::consensus::{consensus_init, ConsensusEvent, ConsensusState, QuorumKind};
use crate::model::{NodeId, Outgoing, ProtocolError, RoundInbox, Value};
use crate::sim::engine::{DelayFn, Process, TraceRecord};
use crate::sim::scenario::Scenario;
use crate::sim::verdict::{Check, Metrics, PropertyResult, RunOutcome, Verdict};
use crate::sim::{consensus_horizon, drive, SimError};

pub(crate) struct ConsensusNode {
    pub(crate) id: NodeId,
    pub(crate) input: Value,
    st: Option<ConsensusState>,
    pub(crate) events: Vec<ConsensusEvent>,
}

impl ConsensusNode {
    pub(crate) fn new(id: NodeId, input: Value) -> Self {
        ConsensusNode { id, input, st: None, events: vec![] }
    }

    /// `(value, phase, round)` once decided.
    pub(crate) fn decision(&self) -> Option<(Value, u64, u64)> {
        self.events.iter().find_map(|e| match e {
            ConsensusEvent::Decided { value, phase, round } => Some((*value, *phase, *round)),
            _ => None,
        })
    }
}

impl Process for ConsensusNode {
    fn id(&self) -> NodeId {
        self.id
    }

    fn on_round(&mut self, round: u64, inbox: &RoundInbox) -> Result<Vec<Outgoing>, ProtocolError> {
        let Some(st) = &mut self.st else {
            let (st, out) = consensus_init(self.id, self.input);
            self.st = Some(st);
            return Ok(out);
        };
        let step = st.step(round, inbox)?;
        self.events.extend(step.events);
        Ok(step.out)
    }

    fn is_halted(&self) -> bool {
        self.st.as_ref().is_some_and(|s| s.terminated())
    }
}

pub(crate) fn nodes(s: &Scenario) -> Result<Vec<(ConsensusNode, u64, bool)>, SimError> {
    s.nodes
        .iter()
        .map(|spec| {
            let input = spec.input.as_ref().expect("validated").as_value()?;
            Ok((ConsensusNode::new(spec.id, input), 1, spec.faulty))
        })
        .collect()
}

/// Runs consensus, optionally with per-edge delays; returns the correct
/// nodes' final state alongside the usual pieces.
pub(crate) fn execute(
    s: &Scenario,
    trace: bool,
    delay: Option<DelayFn>,
) -> Result<(Vec<ConsensusNode>, u64, u64, Option<Vec<TraceRecord>>), SimError> {
    let horizon = s.rounds.unwrap_or_else(|| consensus_horizon(s.faulty().len()));
    let (engine, t) = drive(s, nodes(s)?, horizon, trace, delay, |_| {})?;
    let rounds = engine.round();
    let messages = engine.messages();
    let correct = engine
        .slots()
        .iter()
        .filter(|sl| !sl.byzantine)
        .map(|sl| ConsensusNode {
            id: sl.proc.id,
            input: sl.proc.input,
            st: sl.proc.st.clone(),
            events: sl.proc.events.clone(),
        })
        .collect();
    Ok((correct, rounds, messages, t))
}

pub(crate) fn run(s: &Scenario, trace: bool) -> Result<(RunOutcome, Option<Vec<TraceRecord>>), SimError> {
    let (correct, rounds, messages, t) = execute(s, trace, None)?;
    let properties = check(&correct, s.faulty().len(), rounds);
    let mut termination = BTreeMap::new();
    let mut outputs = BTreeMap::new();
    for c in &correct {
        let d = c.decision();
        termination.insert(c.id, d.map(|(_, _, r)| r));
        outputs.insert(
            c.id,
            match d {
                Some((v, p, r)) => json!({"decision": v, "phase": p, "round": r}),
                None => json!({"decision": null}),
            },
        );
    }
    let verdict = Verdict {
        protocol: s.protocol,
        properties,
        metrics: Metrics { rounds, messages, termination },
    };
    Ok((RunOutcome { verdict, outputs, notes: vec![] }, t))
}

fn check(correct: &[ConsensusNode], f: usize, rounds: u64) -> Vec<PropertyResult> {
    let correct_ids: BTreeSet<NodeId> = correct.iter().map(|c| c.id).collect();
    let inputs: BTreeSet<Value> = correct.iter().map(|c| c.input).collect();
    let decisions: Vec<(NodeId, Value, u64, u64)> = correct
        .iter()
        .filter_map(|c| c.decision().map(|(v, p, r)| (c.id, v, p, r)))
        .collect();

    let mut validity = Check::new("validity");
    if inputs.len() == 1 {
        let v = *inputs.iter().next().expect("one input");
        for &(id, d, _, r) in &decisions {
            validity.observe(r, d == v, || format!("all correct inputs were {v} but node {id} decided {d}"));
        }
    }

    let mut agreement = Check::new("agreement");
    if let Some(&(id0, d0, _, _)) = decisions.first() {
        for &(id, d, _, r) in &decisions[1..] {
            agreement.observe(r, d == d0, || format!("node {id0} decided {d0}, node {id} decided {d}"));
        }
    }

    let mut termination = Check::new("termination");
    for c in correct {
        termination.observe(rounds, c.decision().is_some(), || format!("node {} undecided after round {rounds}", c.id));
    }

    let mut conflicts = Check::new("no_conflicting_quorums");
    let mut quorums: BTreeMap<(u64, QuorumKind), BTreeMap<Value, NodeId>> = BTreeMap::new();
    for c in correct {
        for e in &c.events {
            if let ConsensusEvent::Quorum { round, kind, values } = e {
                for v in values {
                    quorums.entry((*round, *kind)).or_default().entry(*v).or_insert(c.id);
                }
            }
        }
    }
    for ((round, kind), vals) in &quorums {
        conflicts.observe(*round, vals.len() <= 1, || {
            format!("round {round} {kind:?}: two-thirds quorums for {vals:?} (value -> first node)")
        });
    }

    let mut convergence = Check::new("good_round_convergence");
    let mut phase_ends: BTreeMap<u64, Vec<(NodeId, Value, Option<NodeId>)>> = BTreeMap::new();
    for c in correct {
        for e in &c.events {
            if let ConsensusEvent::PhaseEnd { phase, opinion, coordinator } = e {
                phase_ends.entry(*phase).or_default().push((c.id, *opinion, *coordinator));
            }
        }
    }
    for (phase, ends) in &phase_ends {
        // Nodes still running at the end of this phase.
        let running = correct
            .iter()
            .filter(|c| c.decision().is_none_or(|(_, p, _)| p >= *phase))
            .count();
        let coords: BTreeSet<Option<NodeId>> = ends.iter().map(|e| e.2).collect();
        let good = ends.len() == running
            && coords.len() == 1
            && coords.iter().next().expect("one").is_some_and(|c| correct_ids.contains(&c));
        if good {
            let ops: BTreeSet<Value> = ends.iter().map(|e| e.1).collect();
            let round = crate::consensus::round_of(*phase, crate::consensus::SubRound::R5);
            convergence.observe(round, ops.len() == 1, || {
                format!("phase {phase} had a common correct coordinator but opinions {ops:?}")
            });
        }
    }

    let mut spread = Check::new("termination_spread");
    let phases: Vec<u64> = decisions.iter().map(|d| d.2).collect();
    if let (Some(lo), Some(hi)) = (phases.iter().min(), phases.iter().max()) {
        let r = decisions.iter().map(|d| d.3).max().expect("non-empty");
        spread.observe(r, hi - lo <= 1, || format!("decisions span phases {lo}..{hi}"));
    }

    let mut bound = Check::new("round_bound");
    let limit = 2 + 5 * (2 * f as u64 + 3);
    for &(id, _, _, r) in &decisions {
        bound.observe(r, r <= limit, || format!("node {id} decided in round {r}, bound {limit}"));
    }

    vec![
        validity.finish(),
        agreement.finish(),
        termination.finish(),
        conflicts.finish(),
        convergence.finish(),
        spread.finish(),
        bound.finish(),
    ]
}
