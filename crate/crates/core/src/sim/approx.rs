use std::collections::BTreeMap;

use serde_json::json;

use crate::approx::{aa_init, AaState};
use crate::model::{NodeId, Outgoing, ProtocolError, Rational, RoundInbox};
use crate::sim::engine::{Process, TraceRecord};
use crate::sim::scenario::Scenario;
use crate::sim::verdict::{Check, Metrics, PropertyResult, RunOutcome, Verdict};
use crate::sim::{drive, SimError};

struct AaNode {
    id: NodeId,
    input: Rational,
    iterations: u64,
    st: Option<AaState>,
    finished: Option<u64>,
}

impl Process for AaNode {
    fn id(&self) -> NodeId {
        self.id
    }

    fn on_round(&mut self, round: u64, inbox: &RoundInbox) -> Result<Vec<Outgoing>, ProtocolError> {
        let Some(st) = &mut self.st else {
            let (st, out) = aa_init(self.id, self.input, self.iterations);
            self.st = Some(st);
            return Ok(out);
        };
        let out = st.step(round, inbox)?;
        if st.done() && self.finished.is_none() {
            self.finished = Some(round);
        }
        Ok(out)
    }

    fn is_halted(&self) -> bool {
        self.finished.is_some()
    }
}

fn show(q: Rational) -> String {
    q.to_string()
}

pub(crate) fn run(s: &Scenario, trace: bool) -> Result<(RunOutcome, Option<Vec<TraceRecord>>), SimError> {
    let iterations = s.iterations.unwrap_or(1);
    let nodes = s
        .nodes
        .iter()
        .map(|spec| {
            let input = spec.input.as_ref().expect("validated").as_rational()?;
            Ok((AaNode { id: spec.id, input, iterations, st: None, finished: None }, 1, spec.faulty))
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    let horizon = s.rounds.unwrap_or(iterations + 1);
    let (engine, t) = drive(s, nodes, horizon, trace, None, |_| {})?;
    let rounds = engine.round();
    let correct: Vec<(NodeId, &AaState)> = engine
        .slots()
        .iter()
        .filter(|sl| !sl.byzantine)
        .map(|sl| (sl.proc.id, sl.proc.st.as_ref().expect("started")))
        .collect();

    let properties = check(&correct);
    let mut termination = BTreeMap::new();
    let mut outputs = BTreeMap::new();
    for sl in engine.slots().iter().filter(|sl| !sl.byzantine) {
        termination.insert(sl.proc.id, sl.proc.finished);
    }
    for (id, st) in &correct {
        let traj: Vec<String> = st.history().iter().map(|h| show(h.output)).collect();
        outputs.insert(*id, json!({"output": show(st.current()), "trajectory": traj}));
    }
    let verdict = Verdict {
        protocol: s.protocol,
        properties,
        metrics: Metrics { rounds, messages: engine.messages(), termination },
    };
    Ok((RunOutcome { verdict, outputs, notes: vec![] }, t))
}

fn check(correct: &[(NodeId, &AaState)]) -> Vec<PropertyResult> {
    let mut containment = Check::new("containment");
    let mut median = Check::new("median_survival");
    let mut halving = Check::new("halving");
    let iterations = correct.iter().map(|(_, s)| s.history().len()).min().unwrap_or(0);
    for k in 0..iterations {
        let round = k as u64 + 2;
        let mut inputs: Vec<Rational> = correct.iter().map(|(_, s)| s.history()[k].input).collect();
        inputs.sort();
        let outs: Vec<Rational> = correct.iter().map(|(_, s)| s.history()[k].output).collect();
        let (lo, hi) = (inputs[0], inputs[inputs.len() - 1]);
        let g = inputs.len();
        // Both middle elements when g is even.
        let mids = if g % 2 == 1 { vec![inputs[g / 2]] } else { vec![inputs[g / 2 - 1], inputs[g / 2]] };
        for (id, s) in correct {
            let h = &s.history()[k];
            containment.observe(round, lo <= h.output && h.output <= hi, || {
                format!("iteration {}: node {id} output {} outside [{lo}, {hi}]", k + 1, h.output)
            });
            let (tlo, thi) = (h.trimmed[0], h.trimmed[h.trimmed.len() - 1]);
            for m in &mids {
                median.observe(round, tlo <= *m && *m <= thi, || {
                    format!("iteration {}: median {m} outside node {id}'s trimmed [{tlo}, {thi}]", k + 1)
                });
            }
        }
        let out_lo = *outs.iter().min().expect("non-empty");
        let out_hi = *outs.iter().max().expect("non-empty");
        let in_range = hi - lo;
        let out_range = out_hi - out_lo;
        let two = Rational::from_integer(2);
        let ok = out_range * two <= in_range && (in_range == Rational::from_integer(0) || out_range < in_range);
        halving.observe(round, ok, || {
            format!("iteration {}: output range {out_range} vs input range {in_range}", k + 1)
        });
    }
    vec![containment.finish(), median.finish(), halving.finish()]
}
