use std::collections::{BTreeMap, BTreeSet};

use serde_json::json;

use crate::dynamic::{final_at, ChainEntry, DtoError, DtoState};
use crate::model::{Kind, NodeId, Outgoing, ProtocolError, RoundInbox, Value};
use crate::sim::engine::{Engine, Process, TraceRecord};
use crate::sim::scenario::Scenario;
use crate::sim::verdict::{Check, Metrics, PropertyResult, RunOutcome, Verdict};
use crate::sim::{drive, SimError};

pub(crate) const DEFAULT_HORIZON: u64 = 200;

struct DtoNode {
    id: NodeId,
    start: u64,
    leave_at: Option<u64>,
    submits: bool,
    st: Option<DtoState>,
    /// Global rounds in which this node broadcast an event.
    submitted: Vec<u64>,
}

fn protocol_error(e: DtoError) -> ProtocolError {
    match e {
        DtoError::Protocol(p) => p,
        other => ProtocolError::Config(other.to_string()),
    }
}

impl Process for DtoNode {
    fn id(&self) -> NodeId {
        self.id
    }

    fn on_round(&mut self, round: u64, inbox: &RoundInbox) -> Result<Vec<Outgoing>, ProtocolError> {
        let Some(st) = &mut self.st else {
            let (st, out) =
                if self.start == 1 { DtoState::genesis(self.id) } else { DtoState::joiner(self.id, round) };
            self.st = Some(st);
            return Ok(out);
        };
        if self.leave_at == Some(round) {
            st.leave().map_err(protocol_error)?;
        }
        let event = self.submits.then_some(Value::Val(round as i64));
        let step = st.step(round, inbox, event).map_err(protocol_error)?;
        if step.out.iter().any(|o| matches!(o.payload.kind, Kind::Event { .. })) {
            self.submitted.push(round);
        }
        Ok(step.out)
    }

    fn is_halted(&self) -> bool {
        self.st.as_ref().is_some_and(|s| s.halted())
    }
}

/// Sessions of `st` in `(after, upto]`.
fn sessions_between(st: &DtoState, after: Option<u64>, upto: u64) -> Vec<u64> {
    let from = after.map_or(0, |a| a + 1);
    if from > upto {
        return vec![];
    }
    st.snapshots().range(from..=upto).map(|(s, _)| *s).collect()
}

/// Per-round observations the final checks need.
#[derive(Default)]
struct Tracker {
    chains: BTreeMap<NodeId, Vec<ChainEntry>>,
    chained: BTreeMap<NodeId, Option<u64>>,
    finals: BTreeMap<NodeId, Option<u64>>,
    /// `(node, session)` -> global round the session entered the chain.
    appended: BTreeMap<(NodeId, u64), u64>,
    /// `(node, session)` -> global round the session became final.
    final_round: BTreeMap<(NodeId, u64), u64>,
    append_only: Vec<(u64, String)>,
    round_agreement: Vec<(u64, bool, String)>,
}

impl Tracker {
    fn observe(&mut self, engine: &Engine<DtoNode>) {
        let round = engine.round();
        for sl in engine.slots().iter().filter(|sl| !sl.byzantine) {
            let Some(st) = sl.proc.st.as_ref() else { continue };
            if sl.halted_at.is_some_and(|h| h < round) {
                continue;
            }
            let id = sl.proc.id;
            if st.in_loop() {
                let ok = st.r() == round - 1;
                self.round_agreement
                    .push((round, ok, format!("node {id} has r = {} in global round {round}", st.r())));
            }
            let prev = self.chains.entry(id).or_default();
            let chain = st.chain();
            if chain.len() < prev.len() || chain[..prev.len()] != prev[..] {
                self.append_only.push((round, format!("node {id}'s chain was rewritten in round {round}")));
                *prev = chain.to_vec();
            } else {
                prev.extend_from_slice(&chain[prev.len()..]);
            }
            let old = self.chained.insert(id, st.chained_upto()).flatten();
            if let Some(upto) = st.chained_upto() {
                for s in sessions_between(st, old, upto) {
                    self.appended.insert((id, s), round);
                }
            }
            let old = self.finals.insert(id, st.final_upto()).flatten();
            if let Some(upto) = st.final_upto() {
                for s in sessions_between(st, old, upto) {
                    self.final_round.insert((id, s), round);
                }
            }
        }
    }
}

pub(crate) fn run(s: &Scenario, trace: bool) -> Result<(RunOutcome, Option<Vec<TraceRecord>>), SimError> {
    let starts = s.start_rounds();
    let leaves = s.leave_rounds();
    let nodes = s
        .nodes
        .iter()
        .map(|spec| {
            let start = starts[&spec.id];
            let node = DtoNode {
                id: spec.id,
                start,
                leave_at: leaves.get(&spec.id).copied(),
                submits: spec.submits,
                st: None,
                submitted: vec![],
            };
            (node, start, spec.faulty)
        })
        .collect();
    let horizon = s.rounds.unwrap_or(DEFAULT_HORIZON);
    let mut tracker = Tracker::default();
    let (engine, t) = drive(s, nodes, horizon, trace, None, |e| tracker.observe(e))?;
    let rounds = engine.round();
    let correct: Vec<&DtoNode> = engine
        .slots()
        .iter()
        .filter(|sl| !sl.byzantine && sl.proc.st.is_some())
        .map(|sl| &sl.proc)
        .collect();
    let mut notes = Vec::new();
    let properties = check(&correct, &tracker, s.faulty().len(), rounds, &mut notes);

    let mut termination = BTreeMap::new();
    let mut outputs = BTreeMap::new();
    for sl in engine.slots().iter().filter(|sl| !sl.byzantine) {
        termination.insert(sl.proc.id, sl.halted_at);
        let Some(st) = sl.proc.st.as_ref() else { continue };
        let chain: Vec<_> = st.chain().iter().map(|e| json!([e.round, e.submitter, e.event])).collect();
        outputs.insert(
            sl.proc.id,
            json!({"r": st.r(), "final_upto": st.final_upto(), "members": st.members().len(), "chain": chain}),
        );
    }
    let verdict = Verdict {
        protocol: s.protocol,
        properties,
        metrics: Metrics { rounds, messages: engine.messages(), termination },
    };
    Ok((RunOutcome { verdict, outputs, notes }, t))
}

fn st(c: &DtoNode) -> &DtoState {
    c.st.as_ref().expect("started")
}

fn check(
    correct: &[&DtoNode],
    tr: &Tracker,
    f: usize,
    rounds: u64,
    notes: &mut Vec<String>,
) -> Vec<PropertyResult> {
    let correct_ids: BTreeSet<NodeId> = correct.iter().map(|c| c.id).collect();

    let mut prefix = Check::new("chain_prefix");
    for (r, w) in &tr.append_only {
        prefix.observe(*r, false, || w.clone());
    }
    for (i, u) in correct.iter().enumerate() {
        for v in &correct[i + 1..] {
            let (su, sv) = (st(u), st(v));
            let (Some(cu), Some(cv)) = (su.chained_upto(), sv.chained_upto()) else { continue };
            for (&s, mu) in su.snapshots().range(..=cu.min(cv)) {
                let Some(mv) = sv.snapshots().get(&s) else { continue };
                let same = mu.intersection(&correct_ids).eq(mv.intersection(&correct_ids));
                if !same {
                    continue;
                }
                let (ou, ov) = (&su.outputs()[&s], &sv.outputs()[&s]);
                let round = tr.appended[&(u.id, s)].max(tr.appended[&(v.id, s)]);
                let witness = || format!("session {s}: node {} has {ou:?}, node {} has {ov:?}", u.id, v.id);
                if u.leave_at.is_some() || v.leave_at.is_some() {
                    if ou != ov {
                        notes.push(format!("leaver mismatch, {}", witness()));
                    }
                } else {
                    prefix.observe(round, ou == ov, witness);
                }
            }
        }
    }

    let mut growth = Check::new("chain_growth");
    // Local rounds a parallel-consensus run may take before it must be done.
    let run_bound = 2 + 5 * (2 * f as u64 + 3);
    for u in correct.iter().filter(|c| c.submits) {
        for &t in &u.submitted {
            let s = t; // submitted in global round t, ordered by session t
            for w in correct {
                let sw = st(w);
                if !sw.snapshots().contains_key(&s) {
                    continue;
                }
                let mut deadline = 0;
                let mut open = false;
                for (&s2, m) in sw.snapshots().range(..=s) {
                    deadline = deadline.max(final_at(s2, m.len()) + 1);
                    match sw.done_at().get(&s2) {
                        Some(&d) => deadline = deadline.max(d),
                        None => {
                            // Still running at the end: only a violation once
                            // the run had time to finish.
                            if rounds >= s2 + run_bound {
                                deadline = deadline.max(s2 + run_bound);
                            } else {
                                open = true;
                            }
                        }
                    }
                }
                let halted_before = sw.halted() && sw.chained_upto().is_none_or(|c| c < s);
                if open || deadline > rounds || halted_before {
                    continue;
                }
                let entry = ChainEntry { round: s, submitter: u.id, event: Value::Val(t as i64) };
                let at = tr.appended.get(&(w.id, s)).copied();
                let ok = at.is_some_and(|a| a <= deadline) && sw.chain().contains(&entry);
                growth.observe(deadline, ok, || {
                    format!("node {}: event of {} for session {s} not in the chain by round {deadline} (appended {at:?})", w.id, u.id)
                });
            }
        }
    }

    let mut agreement = Check::new("round_agreement");
    for (r, ok, w) in &tr.round_agreement {
        agreement.observe(*r, *ok, || w.clone());
    }

    let mut soundness = Check::new("finality_soundness");
    for (&(w, s), &t) in &tr.final_round {
        for x in correct {
            let sx = st(x);
            if !sx.snapshots().contains_key(&s) {
                continue;
            }
            let done = sx.done_at().get(&s).copied();
            soundness.observe(t, done.is_some_and(|d| d <= t), || {
                format!("session {s} final at node {w} in round {t}, but node {} terminated it in {done:?}", x.id)
            });
        }
    }

    vec![prefix.finish(), growth.finish(), agreement.finish(), soundness.finish()]
}
