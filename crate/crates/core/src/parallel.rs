//! Parallel consensus: many id-tagged consensus instances sharing one rotor
//! and one frozen registry.
//!
//! A node that has no input pair for an id joins that instance when it first
//! hears an `id:input` in the second round, an `id:prefer` in the third round,
//! or an `id:strongprefer` in the fifth round of phase 1; the missing messages
//! of that type are then read as carrying ⊥. Id messages first heard anywhere
//! else are dropped. Instances that settle on ⊥ produce no output.

use std::collections::{BTreeMap, BTreeSet};

use crate::consensus::{passing, phase_of, tally, QuorumKind, SubRound};
use crate::model::{
    ge_one_third, ge_two_thirds, pick_quorum, InstanceId, Kind, NodeId, Outgoing, Payload,
    ProtocolError, RoundInbox, SenderRegistry, Step, Tag, Value,
};
use crate::rotor::{is_rotor_payload, rotor_init_in, RotorEvent, RotorState};

/// How a node came to run an instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Awareness {
    /// Had an input pair (or was started aware with ⊥).
    Start,
    InputRound,
    PreferRound,
    StrongPreferRound,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum MsgType {
    Input = 0,
    Prefer = 1,
    Strong = 2,
}

impl MsgType {
    fn quorum_kind(self) -> QuorumKind {
        match self {
            MsgType::Input => QuorumKind::Input,
            MsgType::Prefer => QuorumKind::Prefer,
            MsgType::Strong => QuorumKind::StrongPrefer,
        }
    }

    fn with(self, v: Value) -> Kind {
        match self {
            MsgType::Input => Kind::Input(v),
            MsgType::Prefer => Kind::Prefer(v),
            MsgType::Strong => Kind::StrongPrefer(v),
        }
    }
}

/// Type of an instance message and the value it carries (`None` for the
/// no-preference markers).
fn classify(kind: &Kind) -> Option<(MsgType, Option<Value>)> {
    match kind {
        Kind::Input(v) => Some((MsgType::Input, Some(*v))),
        Kind::Prefer(v) => Some((MsgType::Prefer, Some(*v))),
        Kind::NoPreference => Some((MsgType::Prefer, None)),
        Kind::StrongPrefer(v) => Some((MsgType::Strong, Some(*v))),
        Kind::NoStrongPreference => Some((MsgType::Strong, None)),
        _ => None,
    }
}

/// One synthesized batch of missing messages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FillRecord {
    pub round: u64,
    pub kind: QuorumKind,
    pub senders: usize,
    pub payload: Kind,
}

#[derive(Clone, Debug)]
pub struct PcInstance {
    id: InstanceId,
    x: Value,
    has_input: bool,
    awareness: Awareness,
    heard: [bool; 3],
    last_sent: [Option<Payload>; 3],
    strong_counts: BTreeMap<Value, usize>,
    fill_log: Vec<FillRecord>,
}

impl PcInstance {
    fn new(id: InstanceId, x: Value, has_input: bool, awareness: Awareness) -> Self {
        PcInstance {
            id,
            x,
            has_input,
            awareness,
            heard: [false; 3],
            last_sent: [None, None, None],
            strong_counts: BTreeMap::new(),
            fill_log: Vec::new(),
        }
    }

    pub fn id(&self) -> InstanceId {
        self.id
    }

    pub fn opinion(&self) -> Value {
        self.x
    }

    pub fn awareness(&self) -> Awareness {
        self.awareness
    }

    pub fn fill_log(&self) -> &[FillRecord] {
        &self.fill_log
    }

    /// Applies the default-fill rule for type `t` and returns the completed
    /// inbox for this instance.
    fn complete(
        &mut self,
        t: MsgType,
        inbox: &RoundInbox,
        registry: &SenderRegistry,
        phase: u64,
        round: u64,
    ) -> RoundInbox {
        let of_type = |p: &Payload| classify(&p.kind).is_some_and(|(mt, _)| mt == t);
        let silent: Vec<NodeId> = registry
            .members()
            .iter()
            .copied()
            .filter(|&u| !inbox.from_sender(u).any(of_type))
            .collect();
        let received_any = registry.members().len() > silent.len();
        let mut out = inbox.clone();
        let fill = if phase == 1 && !self.heard[t as usize] {
            if !received_any {
                return out;
            }
            self.heard[t as usize] = true;
            Some(Payload::tagged(inbox_tag(inbox), t.with(Value::Bot)))
        } else {
            self.last_sent[t as usize].clone()
        };
        if let Some(p) = fill {
            if !silent.is_empty() {
                self.fill_log.push(FillRecord {
                    round,
                    kind: t.quorum_kind(),
                    senders: silent.len(),
                    payload: p.kind.clone(),
                });
            }
            for u in silent {
                out.insert(u, p.clone());
            }
        }
        out
    }
}

fn inbox_tag(inbox: &RoundInbox) -> Tag {
    inbox.iter().next().map(|(_, p)| p.tag).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PcEvent {
    Adopted { id: InstanceId, round: u64, awareness: Awareness },
    Quorum { id: InstanceId, round: u64, kind: QuorumKind, values: Vec<Value> },
    Rotor { round: u64, event: RotorEvent },
    PhaseEnd { id: InstanceId, phase: u64, opinion: Value, coordinator: Option<NodeId> },
    /// The instance terminated; `value` may be ⊥.
    Resolved { id: InstanceId, value: Value, phase: u64, round: u64 },
    /// `(id, value)` joins the output set (`value` ≠ ⊥).
    Output { id: InstanceId, value: Value, round: u64 },
    Finished { round: u64 },
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum PcInputError {
    #[error("instance {0} appears twice in the inputs")]
    DuplicateInstance(InstanceId),
    #[error("instance {0} has ⊥ as input")]
    BottomInput(InstanceId),
}

#[derive(Clone, Debug)]
pub struct PcState {
    self_id: NodeId,
    session: Option<u64>,
    round: u64,
    registry: SenderRegistry,
    rotor: RotorState,
    rotor_buffer: RoundInbox,
    instances: BTreeMap<InstanceId, PcInstance>,
    resolved: BTreeMap<InstanceId, Value>,
    pending_strong: BTreeMap<InstanceId, RoundInbox>,
    coordinator: Option<NodeId>,
    finished: Option<u64>,
}

/// Starts one instance per input pair and the shared rotor.
pub fn pc_start(
    self_id: NodeId,
    inputs: &[(InstanceId, Value)],
    session: Option<u64>,
) -> Result<(PcState, Vec<Outgoing>), PcInputError> {
    let mut seen = BTreeSet::new();
    for &(id, v) in inputs {
        if !seen.insert(id) {
            return Err(PcInputError::DuplicateInstance(id));
        }
        if v.is_bot() {
            return Err(PcInputError::BottomInput(id));
        }
    }
    let mut st = start(self_id, session);
    for &(id, v) in inputs {
        st.0.instances.insert(id, PcInstance::new(id, v, true, Awareness::Start));
    }
    Ok(st)
}

fn start(self_id: NodeId, session: Option<u64>) -> (PcState, Vec<Outgoing>) {
    let (rotor, out) = rotor_init_in(self_id, session, SenderRegistry::growing());
    let st = PcState {
        self_id,
        session,
        round: 1,
        registry: SenderRegistry::growing(),
        rotor,
        rotor_buffer: RoundInbox::new(),
        instances: BTreeMap::new(),
        resolved: BTreeMap::new(),
        pending_strong: BTreeMap::new(),
        coordinator: None,
        finished: None,
    };
    (st, out)
}

impl PcState {
    /// Starts with instances the node knows about but has no input for: they
    /// begin with opinion ⊥ and stay silent until they have something to say.
    pub fn start_aware_of(
        self_id: NodeId,
        ids: &[InstanceId],
        session: Option<u64>,
    ) -> (PcState, Vec<Outgoing>) {
        let mut st = start(self_id, session);
        for &id in ids {
            st.0.instances.insert(id, PcInstance::new(id, Value::Bot, false, Awareness::Start));
        }
        st
    }

    pub fn self_id(&self) -> NodeId {
        self.self_id
    }

    pub fn registry(&self) -> &SenderRegistry {
        &self.registry
    }

    pub fn rotor(&self) -> &RotorState {
        &self.rotor
    }

    pub fn live(&self) -> impl Iterator<Item = &PcInstance> {
        self.instances.values()
    }

    /// Terminated instances with their final opinion (possibly ⊥).
    pub fn resolved(&self) -> &BTreeMap<InstanceId, Value> {
        &self.resolved
    }

    /// The output set so far.
    pub fn outputs(&self) -> impl Iterator<Item = (InstanceId, Value)> + '_ {
        self.resolved.iter().filter(|(_, v)| !v.is_bot()).map(|(k, v)| (*k, *v))
    }

    /// Round in which every known instance had terminated and no new one
    /// could be adopted.
    pub fn finished(&self) -> Option<u64> {
        self.finished
    }

    fn tag(&self, id: InstanceId) -> Tag {
        Tag { session: self.session, instance: Some(id) }
    }

    fn knows(&self, id: InstanceId) -> bool {
        self.instances.contains_key(&id) || self.resolved.contains_key(&id)
    }

    fn adopt(&mut self, id: InstanceId, round: u64, awareness: Awareness, ev: &mut Vec<PcEvent>) {
        self.instances.insert(id, PcInstance::new(id, Value::Bot, false, awareness));
        ev.push(PcEvent::Adopted { id, round, awareness });
    }

    pub fn step(&mut self, round: u64, inbox: &RoundInbox) -> Result<Step<PcEvent>, ProtocolError> {
        if self.finished.is_some() {
            return Err(ProtocolError::AfterTermination(self.self_id));
        }
        if round != self.round + 1 {
            return Err(ProtocolError::OutOfOrder { expected: self.round + 1, got: round });
        }
        self.round = round;
        let session = self.session;
        let mut step = Step::default();
        let inbox = inbox.filtered(|_, p| p.tag.session == session);

        if round == 2 {
            self.registry.absorb(&inbox);
            self.registry.freeze();
            step.out = self.rotor.echo_inits(&inbox)?;
            self.rotor.set_registry(self.registry.clone());
            return Ok(step);
        }

        let inbox = self.registry.absorb(&inbox);
        let n_v = self.registry.n();
        let (phase, sub) = phase_of(round).expect("round >= 3");
        self.rotor_buffer.extend(&inbox.filtered(|_, p| is_rotor_payload(p, session)));

        let mut per_id: BTreeMap<InstanceId, RoundInbox> = BTreeMap::new();
        for (from, p) in inbox.iter() {
            if let Some(id) = p.tag.instance {
                if classify(&p.kind).is_some() || matches!(p.kind, Kind::Opinion(_)) {
                    per_id.entry(id).or_default().insert(from, p.clone());
                }
            }
        }
        let typed = |ib: &RoundInbox, t: MsgType| {
            ib.filtered(|_, p| classify(&p.kind).is_some_and(|(mt, _)| mt == t))
        };
        let value_of = |t: MsgType| {
            move |p: &Payload| match classify(&p.kind) {
                Some((mt, Some(v))) if mt == t => Some(v),
                _ => None,
            }
        };
        let carries_value = |ib: &RoundInbox, t: MsgType| ib.iter().any(|(_, p)| value_of(t)(p).is_some());

        match sub {
            SubRound::R1 => {
                for inst in self.instances.values_mut() {
                    let send = if phase == 1 { inst.has_input && !inst.x.is_bot() } else { true };
                    if send {
                        let p = Payload::tagged(
                            Tag { session, instance: Some(inst.id) },
                            Kind::Input(inst.x),
                        );
                        inst.last_sent[MsgType::Input as usize] = Some(p.clone());
                        step.out.push(Outgoing::broadcast(p));
                    }
                }
            }
            SubRound::R2 | SubRound::R3 => {
                let t = if sub == SubRound::R2 { MsgType::Input } else { MsgType::Prefer };
                let anchor =
                    if sub == SubRound::R2 { Awareness::InputRound } else { Awareness::PreferRound };
                if phase == 1 {
                    for (id, ib) in &per_id {
                        if !self.knows(*id) && carries_value(&typed(ib, t), t) {
                            self.adopt(*id, round, anchor, &mut step.events);
                        }
                    }
                }
                let empty = RoundInbox::new();
                let ids: Vec<InstanceId> = self.instances.keys().copied().collect();
                for id in ids {
                    let tag = self.tag(id);
                    let ib = typed(per_id.get(&id).unwrap_or(&empty), t);
                    let inst = self.instances.get_mut(&id).expect("listed");
                    let full = inst.complete(t, &ib, &self.registry, phase, round);
                    let counts = tally(&full, value_of(t));
                    step.events.push(PcEvent::Quorum {
                        id,
                        round,
                        kind: t.quorum_kind(),
                        values: passing(&counts, n_v)?,
                    });
                    let (next, kind) = if t == MsgType::Input {
                        let prefer = pick_quorum(&counts, |c| ge_two_thirds(c, n_v))?;
                        (MsgType::Prefer, prefer.map_or(Kind::NoPreference, Kind::Prefer))
                    } else {
                        if let Some(x) = pick_quorum(&counts, |c| ge_one_third(c, n_v))? {
                            inst.x = x;
                        }
                        let strong = pick_quorum(&counts, |c| ge_two_thirds(c, n_v))?;
                        (MsgType::Strong, strong.map_or(Kind::NoStrongPreference, Kind::StrongPrefer))
                    };
                    let p = Payload::tagged(tag, kind);
                    inst.last_sent[next as usize] = Some(p.clone());
                    step.out.push(Outgoing::broadcast(p));
                }
            }
            SubRound::R4 => {
                let empty = RoundInbox::new();
                let ids: Vec<InstanceId> = self.instances.keys().copied().collect();
                for id in ids {
                    let ib = typed(per_id.get(&id).unwrap_or(&empty), MsgType::Strong);
                    let inst = self.instances.get_mut(&id).expect("listed");
                    let full = inst.complete(MsgType::Strong, &ib, &self.registry, phase, round);
                    inst.strong_counts = tally(&full, value_of(MsgType::Strong));
                    step.events.push(PcEvent::Quorum {
                        id,
                        round,
                        kind: QuorumKind::StrongPrefer,
                        values: passing(&inst.strong_counts, n_v)?,
                    });
                }
                if phase == 1 {
                    for (id, ib) in &per_id {
                        let strong = typed(ib, MsgType::Strong);
                        if !self.knows(*id) && carries_value(&strong, MsgType::Strong) {
                            self.pending_strong.insert(*id, strong);
                        }
                    }
                }
                self.coordinator = None;
                if !self.rotor.terminated() {
                    let opinions: Vec<Payload> = self
                        .instances
                        .values()
                        .map(|i| Payload::tagged(self.tag(i.id), Kind::Opinion(i.x)))
                        .collect();
                    let buffered = std::mem::take(&mut self.rotor_buffer);
                    let rs = self.rotor.iterate(&buffered, || opinions)?;
                    for e in rs.events {
                        if let RotorEvent::Selected { coordinator, .. } = e {
                            self.coordinator = Some(coordinator);
                        }
                        step.events.push(PcEvent::Rotor { round, event: e });
                    }
                    if self.rotor.terminated() {
                        self.coordinator = None;
                    }
                    step.out = rs.out;
                }
            }
            SubRound::R5 => {
                for (id, ib) in std::mem::take(&mut self.pending_strong) {
                    self.adopt(id, round, Awareness::StrongPreferRound, &mut step.events);
                    let inst = self.instances.get_mut(&id).expect("just adopted");
                    let full = inst.complete(MsgType::Strong, &ib, &self.registry, phase, round);
                    inst.strong_counts = tally(&full, value_of(MsgType::Strong));
                    step.events.push(PcEvent::Quorum {
                        id,
                        round,
                        kind: QuorumKind::StrongPrefer,
                        values: passing(&inst.strong_counts, n_v)?,
                    });
                }
                let coordinator = self.coordinator;
                let mut done = Vec::new();
                for inst in self.instances.values_mut() {
                    let c = coordinator.and_then(|k| {
                        per_id
                            .get(&inst.id)
                            .into_iter()
                            .flat_map(|ib| ib.from_sender(k))
                            .filter_map(|p| match p.kind {
                                Kind::Opinion(v) => Some(v),
                                _ => None,
                            })
                            .min()
                    });
                    if pick_quorum(&inst.strong_counts, |c| ge_one_third(c, n_v))?.is_none() {
                        if let Some(c) = c {
                            inst.x = c;
                        }
                    }
                    step.events.push(PcEvent::PhaseEnd {
                        id: inst.id,
                        phase,
                        opinion: inst.x,
                        coordinator,
                    });
                    if let Some(x) = pick_quorum(&inst.strong_counts, |c| ge_two_thirds(c, n_v))? {
                        inst.x = x;
                        done.push((inst.id, x));
                    }
                }
                for (id, x) in done {
                    self.instances.remove(&id);
                    self.resolved.insert(id, x);
                    step.events.push(PcEvent::Resolved { id, value: x, phase, round });
                    if !x.is_bot() {
                        step.events.push(PcEvent::Output { id, value: x, round });
                    }
                }
                if self.instances.is_empty() {
                    self.finished = Some(round);
                    step.events.push(PcEvent::Finished { round });
                }
            }
        }
        Ok(step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::round_of;

    struct Net {
        nodes: Vec<PcState>,
        sends: Vec<(NodeId, Vec<Outgoing>)>,
        events: Vec<(NodeId, PcEvent)>,
    }

    impl Net {
        fn new(inputs: &[(u64, Vec<(InstanceId, Value)>)]) -> Net {
            let mut nodes = Vec::new();
            let mut sends = Vec::new();
            for (id, pairs) in inputs {
                let (st, out) = pc_start(NodeId(*id), pairs, None).unwrap();
                nodes.push(st);
                sends.push((NodeId(*id), out));
            }
            Net { nodes, sends, events: Vec::new() }
        }

        fn round(&mut self, round: u64, extra: &[(NodeId, Payload)]) {
            let mut inbox = RoundInbox::new();
            for (from, outs) in &self.sends {
                for o in outs {
                    inbox.insert(*from, o.payload.clone());
                }
            }
            for (from, p) in extra {
                inbox.insert(*from, p.clone());
            }
            self.sends.clear();
            for st in self.nodes.iter_mut().filter(|s| s.finished().is_none()) {
                let step = st.step(round, &inbox).unwrap();
                self.events.extend(step.events.into_iter().map(|e| (st.self_id(), e)));
                self.sends.push((st.self_id(), step.out));
            }
        }

        fn outputs(&self) -> BTreeMap<NodeId, Vec<(InstanceId, Value)>> {
            self.nodes.iter().map(|s| (s.self_id(), s.outputs().collect())).collect()
        }
    }

    fn v(x: i64) -> Value {
        Value::Val(x)
    }

    #[test]
    fn start_errors_and_r1() {
        assert_eq!(
            pc_start(NodeId(1), &[(7, v(1)), (7, v(2))], None).unwrap_err(),
            PcInputError::DuplicateInstance(7)
        );
        assert_eq!(
            pc_start(NodeId(1), &[(7, Value::Bot)], None).unwrap_err(),
            PcInputError::BottomInput(7)
        );
        let (mut st, _) = pc_start(NodeId(1), &[(7, v(4))], None).unwrap();
        let mut ib = RoundInbox::new();
        ib.insert(NodeId(1), Payload::new(Kind::Init));
        st.step(2, &ib).unwrap();
        let out = st.step(3, &RoundInbox::new()).unwrap().out;
        assert_eq!(
            out,
            vec![Outgoing::broadcast(Payload::tagged(
                Tag { session: None, instance: Some(7) },
                Kind::Input(v(4))
            ))]
        );
        let (mut empty, _) = pc_start(NodeId(1), &[], None).unwrap();
        empty.step(2, &ib).unwrap();
        assert!(empty.step(3, &RoundInbox::new()).unwrap().out.is_empty());
    }

    #[test]
    fn common_pair_is_output_in_phase_one() {
        let mut net = Net::new(&[
            (10, vec![(7, v(4))]),
            (20, vec![(7, v(4))]),
            (30, vec![(7, v(4))]),
        ]);
        for r in 2..=round_of(1, SubRound::R5) {
            net.round(r, &[]);
        }
        for outs in net.outputs().values() {
            assert_eq!(outs, &vec![(7, v(4))]);
        }
        assert!(net.nodes.iter().all(|s| s.finished().is_some()));
    }

    #[test]
    fn injected_prefer_is_adopted_and_resolves_to_bottom() {
        let mut net = Net::new(&[(10, vec![]), (20, vec![]), (30, vec![])]);
        let byz = NodeId(99);
        let tag = Tag { session: None, instance: Some(9) };
        for r in 2..=round_of(2, SubRound::R5) {
            let mut extra = vec![];
            if r == 2 {
                // make the Byzantine node part of everyone's registry
                extra.push((byz, Payload::new(Kind::Init)));
            }
            if r == round_of(1, SubRound::R3) {
                extra.push((byz, Payload::tagged(tag, Kind::Prefer(v(1)))));
            }
            net.round(r, &extra);
        }
        let adopted = net
            .events
            .iter()
            .filter(|(_, e)| matches!(e, PcEvent::Adopted { id: 9, .. }))
            .count();
        assert_eq!(adopted, 3);
        let resolved: Vec<_> = net
            .events
            .iter()
            .filter_map(|(_, e)| match e {
                PcEvent::Resolved { id: 9, value, .. } => Some(*value),
                _ => None,
            })
            .collect();
        assert_eq!(resolved, vec![Value::Bot; 3]);
        assert!(net.outputs().values().all(|o| o.is_empty()));
    }

    #[test]
    fn late_id_is_discarded() {
        let mut net = Net::new(&[(10, vec![]), (20, vec![]), (30, vec![])]);
        let byz = NodeId(99);
        let tag = Tag { session: None, instance: Some(5) };
        net.round(2, &[(byz, Payload::new(Kind::Init))]);
        for r in 3..=round_of(2, SubRound::R3) {
            let extra = if r == round_of(2, SubRound::R2) {
                vec![(byz, Payload::tagged(tag, Kind::Input(v(3))))]
            } else {
                vec![]
            };
            net.round(r, &extra);
        }
        assert!(!net.events.iter().any(|(_, e)| matches!(e, PcEvent::Adopted { .. })));
    }

    #[test]
    fn adoption_matches_bottom_start() {
        // A node that adopts id 7 at R2 behaves exactly like one that knew the
        // id from the start with opinion ⊥.
        let me = NodeId(20);
        let (mut adopted, _) = pc_start(me, &[], None).unwrap();
        let (mut aware, _) = PcState::start_aware_of(me, &[7], None);
        let mut net = Net::new(&[(10, vec![(7, v(4))]), (30, vec![(7, v(4))])]);
        let mut inbox_log = Vec::new();
        for r in 2..=round_of(3, SubRound::R5) {
            let mut inbox = RoundInbox::new();
            for (from, outs) in &net.sends {
                for o in outs {
                    inbox.insert(*from, o.payload.clone());
                }
            }
            inbox_log.push((r, inbox));
            net.round(r, &[]);
        }
        for (r, inbox) in inbox_log {
            if adopted.finished().is_some() {
                assert!(aware.finished().is_some());
                break;
            }
            let a = adopted.step(r, &inbox).unwrap();
            let b = aware.step(r, &inbox).unwrap();
            assert_eq!(a.out, b.out, "round {r}");
        }
    }
}
