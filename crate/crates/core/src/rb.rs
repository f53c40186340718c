//! Reliable broadcast of a message `(m, s)` when neither `n` nor `f` is known.
//!
//! One [`RbState`] per node tracks every `(m, s)` pair it hears about, so a
//! Byzantine sender that sends different bodies to different nodes, or echoes
//! forged for other senders, each get their own threshold bookkeeping. The
//! protocol never terminates; the driver stops stepping it.

use std::collections::{BTreeMap, BTreeSet};

use crate::model::{
    ge_one_third, ge_two_thirds, Kind, NodeId, Outgoing, Payload, ProtocolError, RoundInbox,
    SenderRegistry, Step, Value,
};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RbEvent {
    Accepted { body: Value, sender: NodeId, round: u64 },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct PairState {
    accepted: Option<u64>,
}

/// Per-round echo tally for one pair, kept for trace-level checks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EchoTally {
    pub round: u64,
    pub sender: NodeId,
    pub body: Value,
    pub echoers: BTreeSet<NodeId>,
    pub n_v: usize,
}

#[derive(Clone, Debug)]
pub struct RbState {
    self_id: NodeId,
    sender_id: NodeId,
    registry: SenderRegistry,
    round: u64,
    pairs: BTreeMap<(NodeId, Value), PairState>,
    echoed: BTreeMap<(NodeId, Value), BTreeSet<u64>>,
    tallies: Vec<EchoTally>,
    nv_history: Vec<usize>,
}

fn echo(sender: NodeId, body: Value) -> Outgoing {
    Outgoing::broadcast(Payload::new(Kind::Echo { origin: sender, body: Some(body) }))
}

/// Round 1. The designated sender broadcasts its body, everyone else
/// announces itself.
pub fn rb_init(
    self_id: NodeId,
    sender_id: NodeId,
    body_if_sender: Option<Value>,
) -> Result<(RbState, Vec<Outgoing>), ProtocolError> {
    let out = match (self_id == sender_id, body_if_sender) {
        (true, Some(body)) => Payload::new(Kind::Message(body)),
        (false, None) => Payload::new(Kind::Present),
        (true, None) => {
            return Err(ProtocolError::Config(format!("sender {self_id} has no body to broadcast")))
        }
        (false, Some(_)) => {
            return Err(ProtocolError::Config(format!(
                "node {self_id} is not the sender {sender_id} but was given a body"
            )))
        }
    };
    let state = RbState {
        self_id,
        sender_id,
        registry: SenderRegistry::growing(),
        round: 1,
        pairs: BTreeMap::new(),
        echoed: BTreeMap::new(),
        tallies: Vec::new(),
        nv_history: Vec::new(),
    };
    Ok((state, vec![Outgoing::broadcast(out)]))
}

impl RbState {
    pub fn self_id(&self) -> NodeId {
        self.self_id
    }

    pub fn sender_id(&self) -> NodeId {
        self.sender_id
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn registry(&self) -> &SenderRegistry {
        &self.registry
    }

    /// `n_v` after each processed round, starting with round 2.
    pub fn nv_history(&self) -> &[usize] {
        &self.nv_history
    }

    pub fn accepted(&self) -> impl Iterator<Item = (NodeId, Value, u64)> + '_ {
        self.pairs.iter().filter_map(|(&(s, m), st)| st.accepted.map(|r| (s, m, r)))
    }

    pub fn accepted_round(&self, sender: NodeId, body: Value) -> Option<u64> {
        self.pairs.get(&(sender, body)).and_then(|p| p.accepted)
    }

    /// Rounds in which this node broadcast `echo(m, s)`.
    pub fn echo_rounds(&self, sender: NodeId, body: Value) -> Option<&BTreeSet<u64>> {
        self.echoed.get(&(sender, body))
    }

    pub fn tallies(&self) -> &[EchoTally] {
        &self.tallies
    }

    pub fn step(&mut self, round: u64, inbox: &RoundInbox) -> Result<Step<RbEvent>, ProtocolError> {
        if round != self.round + 1 {
            return Err(ProtocolError::OutOfOrder { expected: self.round + 1, got: round });
        }
        self.round = round;
        let inbox = self.registry.absorb(inbox);
        let n_v = self.registry.n();
        self.nv_history.push(n_v);
        let mut step = Step::default();

        if round == 2 {
            for (from, p) in inbox.iter() {
                if let (Kind::Message(m), None, None) = (&p.kind, p.tag.session, p.tag.instance) {
                    self.pairs.entry((from, *m)).or_default();
                    self.echoed.entry((from, *m)).or_default().insert(round);
                    step.out.push(echo(from, *m));
                }
            }
            return Ok(step);
        }

        let mut counts: BTreeMap<(NodeId, Value), BTreeSet<NodeId>> = BTreeMap::new();
        for (from, p) in inbox.iter() {
            if p.tag.session.is_some() || p.tag.instance.is_some() {
                continue;
            }
            if let Kind::Echo { origin, body: Some(m) } = p.kind {
                counts.entry((origin, m)).or_default().insert(from);
            }
        }
        for ((s, m), echoers) in counts {
            let c = echoers.len();
            let pair = self.pairs.entry((s, m)).or_default();
            if pair.accepted.is_none() && ge_one_third(c, n_v)? {
                self.echoed.entry((s, m)).or_default().insert(round);
                step.out.push(echo(s, m));
            }
            if pair.accepted.is_none() && ge_two_thirds(c, n_v)? {
                pair.accepted = Some(round);
                step.events.push(RbEvent::Accepted { body: m, sender: s, round });
            }
            self.tallies.push(EchoTally { round, sender: s, body: m, echoers, n_v });
        }
        Ok(step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn deliver(all: &[(NodeId, Vec<Outgoing>)]) -> RoundInbox {
        let mut inbox = RoundInbox::new();
        for (from, outs) in all {
            for o in outs {
                inbox.insert(*from, o.payload.clone());
            }
        }
        inbox
    }

    #[test]
    fn init_outboxes() {
        let (_, out) = rb_init(NodeId(3), NodeId(3), Some(Value::Val(7))).unwrap();
        assert_eq!(out, vec![Outgoing::broadcast(Payload::new(Kind::Message(Value::Val(7))))]);
        let (_, out) = rb_init(NodeId(4), NodeId(3), None).unwrap();
        assert_eq!(out, vec![Outgoing::broadcast(Payload::new(Kind::Present))]);
        assert!(rb_init(NodeId(4), NodeId(3), Some(Value::Val(1))).is_err());
        assert!(rb_init(NodeId(3), NodeId(3), None).is_err());
    }

    #[test]
    fn four_correct_nodes_accept_in_round_three() {
        let ids = [NodeId(2), NodeId(5), NodeId(11), NodeId(40)];
        let s = ids[1];
        let mut nodes = Vec::new();
        let mut sends = Vec::new();
        for &id in &ids {
            let body = (id == s).then_some(Value::Val(7));
            let (st, out) = rb_init(id, s, body).unwrap();
            nodes.push(st);
            sends.push((id, out));
        }
        let mut accepted = Vec::new();
        for round in 2..=5 {
            let inbox = deliver(&sends);
            sends.clear();
            for st in nodes.iter_mut() {
                let step = st.step(round, &inbox).unwrap();
                for RbEvent::Accepted { body, sender, round } in step.events {
                    accepted.push((st.self_id(), body, sender, round));
                }
                sends.push((st.self_id(), step.out));
            }
        }
        assert_eq!(accepted.len(), 4);
        assert!(accepted.iter().all(|&(_, b, s2, r)| b == Value::Val(7) && s2 == s && r == 3));
        // After accepting nobody echoes again.
        assert!(sends.iter().all(|(_, out)| out.is_empty()));
    }

    #[test]
    fn accepted_node_ignores_more_echoes() {
        let me = NodeId(1);
        let s = NodeId(2);
        let (mut st, _) = rb_init(me, s, None).unwrap();
        let mut r1 = RoundInbox::new();
        r1.insert(me, Payload::new(Kind::Present));
        r1.insert(s, Payload::new(Kind::Message(Value::Val(1))));
        st.step(2, &r1).unwrap();
        let mut r = RoundInbox::new();
        for id in [me, s] {
            r.insert(id, Payload::new(Kind::Echo { origin: s, body: Some(Value::Val(1)) }));
        }
        let step = st.step(3, &r).unwrap();
        assert_eq!(step.events.len(), 1);
        let step = st.step(4, &r).unwrap();
        assert!(step.out.is_empty() && step.events.is_empty());
    }

    #[test]
    fn out_of_order_round_is_rejected() {
        let (mut st, _) = rb_init(NodeId(1), NodeId(1), Some(Value::Val(0))).unwrap();
        assert_eq!(
            st.step(3, &RoundInbox::new()).unwrap_err(),
            ProtocolError::OutOfOrder { expected: 2, got: 3 }
        );
    }
}
