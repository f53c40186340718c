use std::collections::{BTreeMap, BTreeSet};

use serde_json::json;

use crate::model::{NodeId, Outgoing, ProtocolError, RoundInbox, Value};
use crate::rotor::{rotor_init, RotorEvent, RotorState};
use crate::sim::engine::{Process, TraceRecord};
use crate::sim::scenario::Scenario;
use crate::sim::verdict::{Check, Metrics, RunOutcome, Verdict};
use crate::sim::{drive, ids, SimError};

struct RotorNode {
    id: NodeId,
    opinion: Value,
    st: Option<RotorState>,
    events: Vec<(u64, RotorEvent)>,
    nv: Vec<(u64, usize)>,
    terminated: Option<u64>,
}

impl Process for RotorNode {
    fn id(&self) -> NodeId {
        self.id
    }

    fn on_round(&mut self, round: u64, inbox: &RoundInbox) -> Result<Vec<Outgoing>, ProtocolError> {
        let Some(st) = &mut self.st else {
            let (st, out) = rotor_init(self.id);
            self.st = Some(st);
            return Ok(out);
        };
        let step = st.step(round, inbox, self.opinion)?;
        self.nv.push((round, st.registry().n()));
        if st.terminated() {
            self.terminated = Some(round);
        }
        self.events.extend(step.events.into_iter().map(|e| (round, e)));
        Ok(step.out)
    }

    fn is_halted(&self) -> bool {
        self.terminated.is_some()
    }
}

pub(crate) fn run(s: &Scenario, trace: bool) -> Result<(RunOutcome, Option<Vec<TraceRecord>>), SimError> {
    let n = s.nodes.len();
    let nodes = s
        .nodes
        .iter()
        .map(|spec| {
            let opinion = spec.input.as_ref().expect("validated").as_value()?;
            let node = RotorNode { id: spec.id, opinion, st: None, events: vec![], nv: vec![], terminated: None };
            Ok((node, 1, spec.faulty))
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    let horizon = s.rounds.unwrap_or(2 + n as u64 + 4);
    let (engine, t) = drive(s, nodes, horizon, trace, None, |_| {})?;
    let rounds = engine.round();
    let correct: Vec<&RotorNode> =
        engine.slots().iter().filter(|sl| !sl.byzantine).map(|sl| &sl.proc).collect();
    let correct_ids: BTreeSet<NodeId> = correct.iter().map(|c| c.id).collect();
    let g = correct.len();

    // Rounds each node processed: from 2 to its termination round.
    let last = |c: &RotorNode| c.terminated.unwrap_or(rounds);
    let added: BTreeMap<(NodeId, NodeId), u64> = correct
        .iter()
        .flat_map(|c| {
            c.events.iter().filter_map(move |(r, e)| match e {
                RotorEvent::CandidateAdded { id, .. } => Some(((c.id, *id), *r)),
                _ => None,
            })
        })
        .collect();

    let mut relay = Check::new("candidate_relay");
    for (&(v, p), &r) in &added {
        for w in &correct {
            if last(w) >= r + 1 {
                let got = added.get(&(w.id, p)).copied();
                relay.observe(r + 1, got.is_some_and(|x| x <= r + 1), || {
                    format!("node {v} added candidate {p} in round {r}, node {} only in {got:?}", w.id)
                });
            }
        }
    }

    let mut good = Check::new("good_round");
    let selections: Vec<BTreeMap<NodeId, NodeId>> = (3..=rounds)
        .map(|r| {
            correct
                .iter()
                .filter_map(|c| {
                    c.events.iter().find_map(|(er, e)| match e {
                        RotorEvent::Selected { coordinator, .. } if *er == r => Some((c.id, *coordinator)),
                        _ => None,
                    })
                })
                .collect()
        })
        .collect();
    let mut found = None;
    for (i, sel) in selections.iter().enumerate() {
        let r = i as u64 + 3;
        let running: Vec<&&RotorNode> = correct.iter().filter(|c| last(c) >= r).collect();
        if running.is_empty() || sel.len() != running.len() {
            continue;
        }
        let coords: BTreeSet<NodeId> = sel.values().copied().collect();
        let c = *coords.iter().next().expect("non-empty");
        if coords.len() != 1 || !correct_ids.contains(&c) {
            continue;
        }
        let next: Vec<&&RotorNode> = correct.iter().filter(|w| last(w) > r).collect();
        let accepted_by_all = !next.is_empty() && next.iter().all(|w| {
            w.events.iter().any(|(er, e)| {
                *er == r + 1 && matches!(e, RotorEvent::OpinionAccepted { from, .. } if *from == c)
            })
        });
        if accepted_by_all {
            found = Some(r);
            break;
        }
    }
    good.observe(rounds, found.is_some(), || "no round where all correct nodes selected one correct coordinator and accepted its opinion".into());

    let mut bound = Check::new("termination_bound");
    for c in &correct {
        let it = c.events.iter().find_map(|(_, e)| match e {
            RotorEvent::Terminated { iteration } => Some(*iteration + 1),
            _ => None,
        });
        bound.observe(c.terminated.unwrap_or(rounds), it.is_some_and(|i| i <= n as u64 + 1), || {
            format!("node {} used {it:?} iterations, bound {}", c.id, n + 1)
        });
    }

    let mut first = Check::new("correct_ids_first");
    if rounds >= 3 {
        for c in &correct {
            let got: BTreeSet<NodeId> = c
                .events
                .iter()
                .filter_map(|(r, e)| match e {
                    RotorEvent::CandidateAdded { id, .. } if *r == 3 => Some(*id),
                    _ => None,
                })
                .collect();
            let missing: Vec<NodeId> = correct_ids.difference(&got).copied().collect();
            first.observe(3, missing.is_empty(), || {
                format!("node {} lacks correct candidates {} after the first iteration", c.id, ids(missing.clone()))
            });
        }
    }

    let mut nv = Check::new("nv_bounded");
    for c in &correct {
        for &(r, x) in &c.nv {
            nv.observe(r, g <= x && x <= n, || format!("node {} has n_v = {x} outside [{g}, {n}]", c.id));
        }
    }

    let mut termination = BTreeMap::new();
    let mut outputs = BTreeMap::new();
    for c in &correct {
        termination.insert(c.id, c.terminated);
        let coords: Vec<NodeId> = c
            .events
            .iter()
            .filter_map(|(_, e)| match e {
                RotorEvent::Selected { coordinator, .. } => Some(*coordinator),
                _ => None,
            })
            .collect();
        let accepted: Vec<_> = c
            .events
            .iter()
            .filter_map(|(r, e)| match e {
                RotorEvent::OpinionAccepted { from, value, .. } => Some(json!({"round": r, "from": from, "value": value})),
                _ => None,
            })
            .collect();
        outputs.insert(c.id, json!({"terminated": c.terminated, "coordinators": coords, "accepted": accepted}));
    }
    let verdict = Verdict {
        protocol: s.protocol,
        properties: vec![relay.finish(), good.finish(), bound.finish(), first.finish(), nv.finish()],
        metrics: Metrics { rounds, messages: engine.messages(), termination },
    };
    Ok((RunOutcome { verdict, outputs, notes: vec![] }, t))
}
