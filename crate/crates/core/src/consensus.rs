//! Early-terminating consensus on top of the rotor-coordinator.
//!
//! Rounds 1 and 2 initialize the rotor and freeze the sender registry. After
//! that every phase takes five rounds: input, prefer, strongprefer, rotor,
//! decide. Strongprefer messages land in the rotor round and are acted on in
//! the decide round; rotor traffic is buffered until the next rotor round,
//! except the coordinator's opinion, which the decide round reads directly.

use std::collections::BTreeMap;

use crate::model::{
    ge_one_third, ge_two_thirds, pick_quorum, Kind, NodeId, Outgoing, Payload, ProtocolError,
    RoundInbox, SenderRegistry, Step, Value,
};
use crate::rotor::{is_rotor_payload, rotor_init_in, RotorEvent, RotorState};

/// Position inside a five-round phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum SubRound {
    R1,
    R2,
    R3,
    R4,
    R5,
}

/// Maps a round (≥ 3) onto `(phase, subround)`; phases count from 1.
pub fn phase_of(round: u64) -> Option<(u64, SubRound)> {
    if round < 3 {
        return None;
    }
    let k = round - 3;
    let sub = match k % 5 {
        0 => SubRound::R1,
        1 => SubRound::R2,
        2 => SubRound::R3,
        3 => SubRound::R4,
        _ => SubRound::R5,
    };
    Some((k / 5 + 1, sub))
}

/// First round of `sub` in `phase`.
pub fn round_of(phase: u64, sub: SubRound) -> u64 {
    3 + (phase - 1) * 5 + sub as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum QuorumKind {
    Input,
    Prefer,
    StrongPrefer,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ConsensusEvent {
    /// Values that reached a two-thirds count at this node this round.
    Quorum { round: u64, kind: QuorumKind, values: Vec<Value> },
    Rotor { round: u64, event: RotorEvent },
    PhaseEnd { phase: u64, opinion: Value, coordinator: Option<NodeId> },
    Decided { value: Value, phase: u64, round: u64 },
}

#[derive(Clone, Debug)]
pub struct ConsensusState {
    self_id: NodeId,
    x: Value,
    registry: SenderRegistry,
    rotor: RotorState,
    round: u64,
    rotor_buffer: RoundInbox,
    strong_counts: BTreeMap<Value, usize>,
    last_sent: Option<Payload>,
    coordinator: Option<NodeId>,
    output: Option<(Value, u64)>,
}

/// Round 1: start the rotor; the opinion starts as the input.
pub fn consensus_init(self_id: NodeId, input: Value) -> (ConsensusState, Vec<Outgoing>) {
    let (rotor, out) = rotor_init_in(self_id, None, SenderRegistry::growing());
    let st = ConsensusState {
        self_id,
        x: input,
        registry: SenderRegistry::growing(),
        rotor,
        round: 1,
        rotor_buffer: RoundInbox::new(),
        strong_counts: BTreeMap::new(),
        last_sent: None,
        coordinator: None,
        output: None,
    };
    (st, out)
}

/// For every registered sender that delivered nothing matching `relevant`,
/// injects `last_sent` (this node's own previous broadcast) on its behalf.
pub fn substitute_missing(
    registry: &SenderRegistry,
    last_sent: Option<&Payload>,
    inbox: &RoundInbox,
    relevant: impl Fn(&Payload) -> bool,
) -> RoundInbox {
    let mut out = inbox.clone();
    if let Some(p) = last_sent {
        for &u in registry.members() {
            if !inbox.from_sender(u).any(&relevant) {
                out.insert(u, p.clone());
            }
        }
    }
    out
}

/// Counts distinct senders per value for payloads `extract` recognizes.
pub(crate) fn tally(
    inbox: &RoundInbox,
    extract: impl Fn(&Payload) -> Option<Value>,
) -> BTreeMap<Value, usize> {
    let mut counts: BTreeMap<Value, usize> = BTreeMap::new();
    let mut seen = std::collections::BTreeSet::new();
    for (from, p) in inbox.iter() {
        if let Some(v) = extract(p) {
            if seen.insert((from, v)) {
                *counts.entry(v).or_default() += 1;
            }
        }
    }
    counts
}

pub(crate) fn passing(
    counts: &BTreeMap<Value, usize>,
    n: usize,
) -> Result<Vec<Value>, ProtocolError> {
    let mut out = Vec::new();
    for (&v, &c) in counts {
        if ge_two_thirds(c, n)? {
            out.push(v);
        }
    }
    Ok(out)
}

fn untagged(p: &Payload) -> bool {
    p.tag.session.is_none() && p.tag.instance.is_none()
}

impl ConsensusState {
    pub fn self_id(&self) -> NodeId {
        self.self_id
    }

    pub fn opinion(&self) -> Value {
        self.x
    }

    pub fn registry(&self) -> &SenderRegistry {
        &self.registry
    }

    pub fn rotor(&self) -> &RotorState {
        &self.rotor
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    /// `(value, round)` once terminated.
    pub fn output(&self) -> Option<(Value, u64)> {
        self.output
    }

    pub fn terminated(&self) -> bool {
        self.output.is_some()
    }

    pub fn step(
        &mut self,
        round: u64,
        inbox: &RoundInbox,
    ) -> Result<Step<ConsensusEvent>, ProtocolError> {
        if self.output.is_some() {
            return Err(ProtocolError::AfterTermination(self.self_id));
        }
        if round != self.round + 1 {
            return Err(ProtocolError::OutOfOrder { expected: self.round + 1, got: round });
        }
        self.round = round;
        let mut step = Step::default();

        if round == 2 {
            self.registry.absorb(inbox);
            self.registry.freeze();
            step.out = self.rotor.echo_inits(inbox)?;
            self.rotor.set_registry(self.registry.clone());
            return Ok(step);
        }

        let inbox = self.registry.absorb(inbox);
        let n_v = self.registry.n();
        let (phase, sub) = phase_of(round).expect("round >= 3");
        self.rotor_buffer.extend(&inbox.filtered(|_, p| is_rotor_payload(p, None)));

        match sub {
            SubRound::R1 => {
                let p = Payload::new(Kind::Input(self.x));
                step.out.push(Outgoing::broadcast(p.clone()));
                self.last_sent = Some(p);
            }
            SubRound::R2 => {
                let is_input = |p: &Payload| untagged(p) && matches!(p.kind, Kind::Input(_));
                let subst =
                    substitute_missing(&self.registry, self.last_sent.as_ref(), &inbox, is_input);
                let counts = tally(&subst, |p| match p.kind {
                    Kind::Input(v) if untagged(p) => Some(v),
                    _ => None,
                });
                let values = passing(&counts, n_v)?;
                step.events.push(ConsensusEvent::Quorum { round, kind: QuorumKind::Input, values });
                // Abstaining is explicit: peers substitute for silent senders,
                // so silence must only come from terminated or faulty nodes.
                let kind = match pick_quorum(&counts, |c| ge_two_thirds(c, n_v))? {
                    Some(x) => Kind::Prefer(x),
                    None => Kind::NoPreference,
                };
                let p = Payload::new(kind);
                step.out.push(Outgoing::broadcast(p.clone()));
                self.last_sent = Some(p);
            }
            SubRound::R3 => {
                let is_prefer =
                    |p: &Payload| untagged(p) && matches!(p.kind, Kind::Prefer(_) | Kind::NoPreference);
                let subst =
                    substitute_missing(&self.registry, self.last_sent.as_ref(), &inbox, is_prefer);
                let counts = tally(&subst, |p| match p.kind {
                    Kind::Prefer(v) if untagged(p) => Some(v),
                    _ => None,
                });
                let values = passing(&counts, n_v)?;
                step.events.push(ConsensusEvent::Quorum { round, kind: QuorumKind::Prefer, values });
                if let Some(x) = pick_quorum(&counts, |c| ge_one_third(c, n_v))? {
                    self.x = x;
                }
                let kind = match pick_quorum(&counts, |c| ge_two_thirds(c, n_v))? {
                    Some(x) => Kind::StrongPrefer(x),
                    None => Kind::NoStrongPreference,
                };
                let p = Payload::new(kind);
                step.out.push(Outgoing::broadcast(p.clone()));
                self.last_sent = Some(p);
            }
            SubRound::R4 => {
                let is_strong = |p: &Payload| {
                    untagged(p) && matches!(p.kind, Kind::StrongPrefer(_) | Kind::NoStrongPreference)
                };
                let subst =
                    substitute_missing(&self.registry, self.last_sent.as_ref(), &inbox, is_strong);
                self.strong_counts = tally(&subst, |p| match p.kind {
                    Kind::StrongPrefer(v) if untagged(p) => Some(v),
                    _ => None,
                });
                let values = passing(&self.strong_counts, n_v)?;
                step.events.push(ConsensusEvent::Quorum {
                    round,
                    kind: QuorumKind::StrongPrefer,
                    values,
                });
                self.last_sent = None;
                self.coordinator = None;
                if !self.rotor.terminated() {
                    let buffered = std::mem::take(&mut self.rotor_buffer);
                    let opinion = Payload::new(Kind::Opinion(self.x));
                    let rs = self.rotor.iterate(&buffered, || vec![opinion])?;
                    for e in rs.events {
                        if let RotorEvent::Selected { coordinator, .. } = e {
                            self.coordinator = Some(coordinator);
                        }
                        step.events.push(ConsensusEvent::Rotor { round, event: e });
                    }
                    if self.rotor.terminated() {
                        self.coordinator = None;
                    }
                    step.out = rs.out;
                }
            }
            SubRound::R5 => {
                let c = self.coordinator.and_then(|k| {
                    inbox
                        .from_sender(k)
                        .filter(|p| is_rotor_payload(p, None))
                        .filter_map(|p| match p.kind {
                            Kind::Opinion(v) => Some(v),
                            _ => None,
                        })
                        .min()
                });
                let weak = pick_quorum(&self.strong_counts, |c| ge_one_third(c, n_v))?;
                if weak.is_none() {
                    if let Some(c) = c {
                        self.x = c;
                    }
                }
                step.events.push(ConsensusEvent::PhaseEnd {
                    phase,
                    opinion: self.x,
                    coordinator: self.coordinator,
                });
                if let Some(x) = pick_quorum(&self.strong_counts, |c| ge_two_thirds(c, n_v))? {
                    self.x = x;
                    self.output = Some((x, round));
                    step.events.push(ConsensusEvent::Decided { value: x, phase, round });
                }
            }
        }
        Ok(step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(inputs: &[(u64, i64)], max_round: u64) -> BTreeMap<NodeId, (Value, u64)> {
        let mut nodes = Vec::new();
        let mut sends: Vec<(NodeId, Vec<Outgoing>)> = Vec::new();
        for &(id, x) in inputs {
            let (st, out) = consensus_init(NodeId(id), Value::Val(x));
            nodes.push(st);
            sends.push((NodeId(id), out));
        }
        for round in 2..=max_round {
            let mut inbox = RoundInbox::new();
            for (from, outs) in &sends {
                for o in outs {
                    inbox.insert(*from, o.payload.clone());
                }
            }
            sends.clear();
            for st in nodes.iter_mut().filter(|s| !s.terminated()) {
                let step = st.step(round, &inbox).unwrap();
                sends.push((st.self_id(), step.out));
            }
        }
        nodes.iter().filter_map(|s| s.output().map(|o| (s.self_id(), o))).collect()
    }

    #[test]
    fn unanimous_input_decides_in_phase_one() {
        let out = run(&[(3, 1), (8, 1), (21, 1), (22, 1)], 20);
        assert_eq!(out.len(), 4);
        for (v, r) in out.values() {
            assert_eq!(*v, Value::Val(1));
            assert_eq!(*r, round_of(1, SubRound::R5));
        }
    }

    #[test]
    fn mixed_inputs_agree() {
        let out = run(&[(3, 0), (8, 0), (21, 1)], 40);
        assert_eq!(out.len(), 3);
        let vals: std::collections::BTreeSet<_> = out.values().map(|(v, _)| *v).collect();
        assert_eq!(vals.len(), 1);
    }

    #[test]
    fn substitution_rule() {
        let reg = SenderRegistry::frozen([NodeId(1), NodeId(2)].into());
        let mut inbox = RoundInbox::new();
        inbox.insert(NodeId(1), Payload::new(Kind::Prefer(Value::Val(1))));
        let is_pref = |p: &Payload| matches!(p.kind, Kind::Prefer(_));
        let last = Payload::new(Kind::Prefer(Value::Val(1)));
        let out = substitute_missing(&reg, Some(&last), &inbox, is_pref);
        assert!(out.from_sender(NodeId(2)).any(|p| *p == last));
        assert_eq!(substitute_missing(&reg, None, &inbox, is_pref), inbox);
        inbox.insert(NodeId(2), Payload::new(Kind::Prefer(Value::Val(0))));
        assert_eq!(substitute_missing(&reg, Some(&last), &inbox, is_pref), inbox);
    }

    #[test]
    fn phase_grid() {
        assert_eq!(phase_of(2), None);
        assert_eq!(phase_of(3), Some((1, SubRound::R1)));
        assert_eq!(phase_of(7), Some((1, SubRound::R5)));
        assert_eq!(phase_of(8), Some((2, SubRound::R1)));
        assert_eq!(round_of(2, SubRound::R3), 10);
    }
}
