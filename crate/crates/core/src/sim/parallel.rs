use std::collections::{BTreeMap, BTreeSet};

use serde_json::json;

use crate::model::{InstanceId, NodeId, Outgoing, ProtocolError, RoundInbox, Value};
use crate::parallel::{pc_start, PcState};
use crate::sim::engine::{Process, TraceRecord};
use crate::sim::scenario::Scenario;
use crate::sim::verdict::{Check, Metrics, PropertyResult, RunOutcome, Verdict};
use crate::sim::{consensus_horizon, drive, SimError};

struct PcNode {
    id: NodeId,
    pairs: Vec<(InstanceId, Value)>,
    st: Option<PcState>,
}

impl Process for PcNode {
    fn id(&self) -> NodeId {
        self.id
    }

    fn on_round(&mut self, round: u64, inbox: &RoundInbox) -> Result<Vec<Outgoing>, ProtocolError> {
        let Some(st) = &mut self.st else {
            let (st, out) = pc_start(self.id, &self.pairs, None)
                .map_err(|e| ProtocolError::Config(e.to_string()))?;
            self.st = Some(st);
            return Ok(out);
        };
        Ok(st.step(round, inbox)?.out)
    }

    fn is_halted(&self) -> bool {
        self.st.as_ref().is_some_and(|s| s.finished().is_some())
    }
}

pub(crate) fn run(s: &Scenario, trace: bool) -> Result<(RunOutcome, Option<Vec<TraceRecord>>), SimError> {
    let nodes = s
        .nodes
        .iter()
        .map(|spec| {
            let pairs = spec.pairs.iter().map(|&(i, v)| (i, Value::Val(v))).collect();
            (PcNode { id: spec.id, pairs, st: None }, 1, spec.faulty)
        })
        .collect();
    let horizon = s.rounds.unwrap_or_else(|| consensus_horizon(s.faulty().len()));
    let (engine, t) = drive(s, nodes, horizon, trace, None, |_| {})?;
    let rounds = engine.round();
    let correct: Vec<&PcNode> = engine.slots().iter().filter(|sl| !sl.byzantine).map(|sl| &sl.proc).collect();
    let mut notes = Vec::new();
    let properties = check(&correct, rounds, &mut notes);

    let mut termination = BTreeMap::new();
    let mut outputs = BTreeMap::new();
    for c in &correct {
        let st = c.st.as_ref().expect("started");
        termination.insert(c.id, st.finished());
        let out: Vec<_> = st.outputs().map(|(i, v)| json!([i, v])).collect();
        outputs.insert(c.id, json!({"outputs": out, "finished": st.finished()}));
    }
    let verdict = Verdict {
        protocol: s.protocol,
        properties,
        metrics: Metrics { rounds, messages: engine.messages(), termination },
    };
    Ok((RunOutcome { verdict, outputs, notes }, t))
}

fn check(correct: &[&PcNode], rounds: u64, notes: &mut Vec<String>) -> Vec<PropertyResult> {
    let finished: Vec<(&PcNode, &PcState, u64)> = correct
        .iter()
        .filter_map(|c| {
            let st = c.st.as_ref()?;
            st.finished().map(|r| (*c, st, r))
        })
        .collect();
    let out_of = |st: &PcState| st.outputs().collect::<BTreeMap<InstanceId, Value>>();

    let mut validity = Check::new("validity");
    let mut common: Option<BTreeSet<(InstanceId, Value)>> = None;
    for c in correct {
        let mine: BTreeSet<_> = c.pairs.iter().copied().collect();
        common = Some(match common {
            None => mine,
            Some(acc) => acc.intersection(&mine).copied().collect(),
        });
    }
    for &(c, st, r) in &finished {
        let outs = out_of(st);
        for &(i, v) in common.iter().flatten() {
            validity.observe(r, outs.get(&i) == Some(&v), || {
                format!("every correct node had ({i},{v}) but node {} output {:?}", c.id, outs.get(&i))
            });
        }
    }

    let mut agreement = Check::new("agreement");
    let ids: BTreeSet<InstanceId> = finished.iter().flat_map(|(_, st, _)| out_of(st).into_keys()).collect();
    let last = finished.iter().map(|f| f.2).max().unwrap_or(rounds);
    for i in ids {
        let views: BTreeMap<NodeId, Option<Value>> =
            finished.iter().map(|(c, st, _)| (c.id, out_of(st).get(&i).copied())).collect();
        let distinct: BTreeSet<Option<Value>> = views.values().copied().collect();
        agreement.observe(last, distinct.len() == 1, || format!("instance {i}: outputs differ {views:?}"));
    }

    let mut termination = Check::new("termination");
    for c in correct {
        let done = c.st.as_ref().and_then(|s| s.finished());
        termination.observe(rounds, done.is_some(), || format!("node {} unfinished after round {rounds}", c.id));
    }

    let mut phantom = Check::new("no_phantom_output");
    let real_ids: BTreeSet<InstanceId> = correct.iter().flat_map(|c| c.pairs.iter().map(|p| p.0)).collect();
    let real: BTreeSet<(InstanceId, Value)> = correct.iter().flat_map(|c| c.pairs.iter().copied()).collect();
    for &(c, st, r) in &finished {
        for (i, v) in st.outputs() {
            phantom.observe(r, real_ids.contains(&i), || {
                format!("node {} output ({i},{v}), but no correct node had instance {i} as input", c.id)
            });
            if real_ids.contains(&i) && !real.contains(&(i, v)) {
                notes.push(format!("node {} output ({i},{v}); correct inputs for {i} disagreed", c.id));
            }
        }
    }
    notes.sort();
    notes.dedup();

    vec![validity.finish(), agreement.finish(), termination.finish(), phantom.finish()]
}
