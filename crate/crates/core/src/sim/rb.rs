use std::collections::{BTreeMap, BTreeSet};

use serde_json::json;

use crate::model::{NodeId, Outgoing, ProtocolError, RoundInbox, Value};
use crate::rb::{rb_init, RbState};
use crate::sim::engine::{Process, TraceRecord};
use crate::sim::scenario::Scenario;
use crate::sim::verdict::{Check, Metrics, RunOutcome, Verdict};
use crate::sim::{drive, SimError};

pub(crate) const DEFAULT_HORIZON: u64 = 8;

pub(crate) struct RbNode {
    id: NodeId,
    sender: NodeId,
    body: Option<Value>,
    st: Option<RbState>,
}

impl RbNode {
    pub(crate) fn new(id: NodeId, sender: NodeId, body: Option<Value>) -> Self {
        RbNode { id, sender, body, st: None }
    }

    pub(crate) fn state(&self) -> &RbState {
        self.st.as_ref().expect("started")
    }
}

impl Process for RbNode {
    fn id(&self) -> NodeId {
        self.id
    }

    fn on_round(&mut self, round: u64, inbox: &RoundInbox) -> Result<Vec<Outgoing>, ProtocolError> {
        match &mut self.st {
            None => {
                let body = if self.id == self.sender { self.body } else { None };
                let (st, out) = rb_init(self.id, self.sender, body)?;
                self.st = Some(st);
                Ok(out)
            }
            Some(st) => Ok(st.step(round, inbox)?.out),
        }
    }

    fn is_halted(&self) -> bool {
        false
    }
}

pub(crate) fn run(s: &Scenario, trace: bool) -> Result<(RunOutcome, Option<Vec<TraceRecord>>), SimError> {
    let sender = s.sender_id();
    let faulty = s.faulty();
    let nodes = s
        .nodes
        .iter()
        .map(|n| {
            let body = n.input.as_ref().map(|v| v.as_value()).transpose()?;
            Ok((RbNode::new(n.id, sender, body), 1, n.faulty))
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    let body = s.nodes.iter().find(|n| n.id == sender).and_then(|n| n.input.as_ref()).map(|v| v.as_value()).transpose()?.expect("validated");
    let horizon = s.rounds.unwrap_or(DEFAULT_HORIZON);
    let (engine, t) = drive(s, nodes, horizon, trace, None, |_| {})?;
    let rounds = engine.round();
    let correct: Vec<&RbState> =
        engine.slots().iter().filter(|sl| !sl.byzantine).map(|sl| sl.proc.state()).collect();
    let checks = check(&correct, &faulty, sender, body, s.nodes.len(), rounds);

    let mut termination = BTreeMap::new();
    let mut outputs = BTreeMap::new();
    for st in &correct {
        let first = st.accepted().filter(|(snd, _, _)| *snd == sender).map(|(_, _, r)| r).min();
        termination.insert(st.self_id(), first);
        let acc: Vec<_> = st
            .accepted()
            .map(|(snd, m, r)| json!({"sender": snd, "body": m, "round": r}))
            .collect();
        outputs.insert(st.self_id(), json!({ "accepted": acc }));
    }
    let verdict = Verdict {
        protocol: s.protocol,
        properties: checks,
        metrics: Metrics { rounds, messages: engine.messages(), termination },
    };
    Ok((RunOutcome { verdict, outputs, notes: vec![] }, t))
}

/// Checks the broadcast guarantees over the final states of the correct
/// nodes. Shared with the exhaustive explorer.
pub(crate) fn check(
    correct: &[&RbState],
    faulty: &BTreeSet<NodeId>,
    sender: NodeId,
    body: Value,
    n: usize,
    horizon: u64,
) -> Vec<crate::sim::verdict::PropertyResult> {
    let g = correct.len();
    let correct_ids: BTreeSet<NodeId> = correct.iter().map(|s| s.self_id()).collect();
    let sender_correct = !faulty.contains(&sender);

    let mut correctness = Check::new("correctness");
    if sender_correct && horizon >= 3 {
        for st in correct {
            let r = st.accepted_round(sender, body);
            correctness.observe(r.unwrap_or(3), r == Some(3), || {
                format!("node {} accepted ({body},{sender}) in round {r:?}, not 3", st.self_id())
            });
        }
    }

    let mut unforgeability = Check::new("unforgeability");
    for st in correct {
        for (s, m, r) in st.accepted() {
            if correct_ids.contains(&s) {
                let ok = s == sender && m == body;
                unforgeability.observe(r, ok, || {
                    format!("node {} accepted ({m},{s}) which {s} never sent", st.self_id())
                });
            }
        }
    }

    // Earliest acceptance of each pair among correct nodes.
    let mut first: BTreeMap<(NodeId, Value), u64> = BTreeMap::new();
    for st in correct {
        for (s, m, r) in st.accepted() {
            first.entry((s, m)).and_modify(|x| *x = (*x).min(r)).or_insert(r);
        }
    }

    let mut relay = Check::new("relay");
    for (&(s, m), &r) in &first {
        if r < horizon {
            for st in correct {
                let got = st.accepted_round(s, m);
                relay.observe(r + 1, got.is_some_and(|x| x <= r + 1), || {
                    format!(
                        "({m},{s}) accepted in round {r} somewhere but by node {} only in {got:?}",
                        st.self_id()
                    )
                });
            }
        }
    }

    let mut echo_support = Check::new("echo_support");
    for st in correct {
        for (s, m, r) in st.accepted() {
            let backed = correct
                .iter()
                .any(|u| u.echo_rounds(s, m).is_some_and(|rs| rs.contains(&(r - 1))));
            echo_support.observe(r, backed, || {
                format!("node {} accepted ({m},{s}) in round {r} with no correct echo in round {}", st.self_id(), r - 1)
            });
        }
    }

    let mut quorum_spread = Check::new("quorum_spread");
    for (&(s, m), &r) in &first {
        for st in correct {
            let accepted_by_r = st.accepted_round(s, m).is_some_and(|x| x <= r);
            let echoed = st.echo_rounds(s, m).is_some_and(|rs| rs.contains(&r));
            quorum_spread.observe(r, accepted_by_r || echoed, || {
                format!("({m},{s}) accepted in round {r} but node {} neither accepted nor echoed", st.self_id())
            });
        }
    }

    let mut monotone = Check::new("registry_monotone");
    let mut bounded = Check::new("nv_bounded");
    for st in correct {
        let h = st.nv_history();
        for (i, w) in h.windows(2).enumerate() {
            monotone.observe(i as u64 + 3, w[0] <= w[1], || {
                format!("node {} n_v fell from {} to {}", st.self_id(), w[0], w[1])
            });
        }
        for (i, &nv) in h.iter().enumerate() {
            bounded.observe(i as u64 + 2, g <= nv && nv <= n, || {
                format!("node {} has n_v = {nv} outside [{g}, {n}]", st.self_id())
            });
        }
    }

    vec![
        correctness.finish(),
        unforgeability.finish(),
        relay.finish(),
        echo_support.finish(),
        quorum_spread.finish(),
        monotone.finish(),
        bounded.finish(),
    ]
}
