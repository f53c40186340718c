//! Rotor-coordinator: each loop iteration selects the next candidate in id
//! order, so that every correct node sees a common correct coordinator before
//! it reselects someone and stops.

use std::collections::BTreeSet;

use crate::model::{
    ge_one_third, ge_two_thirds, Kind, NodeId, Outgoing, Payload, ProtocolError, RoundInbox,
    SenderRegistry, Step, Tag, Value,
};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RotorEvent {
    CandidateAdded { id: NodeId, iteration: u64 },
    Selected { coordinator: NodeId, iteration: u64 },
    OpinionAccepted { from: NodeId, value: Value, iteration: u64 },
    Terminated { iteration: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    AwaitInits,
    Loop,
    Done,
}

#[derive(Clone, Debug)]
pub struct RotorState {
    self_id: NodeId,
    session: Option<u64>,
    registry: SenderRegistry,
    candidates: BTreeSet<NodeId>,
    selected: BTreeSet<NodeId>,
    pending: BTreeSet<Payload>,
    iteration: u64,
    prev_coordinator: Option<NodeId>,
    stage: Stage,
}

/// Round 1: announce willingness to coordinate.
pub fn rotor_init(self_id: NodeId) -> (RotorState, Vec<Outgoing>) {
    rotor_init_in(self_id, None, SenderRegistry::growing())
}

/// Like [`rotor_init`], with a session tag on every message and a caller-chosen
/// registry (consensus hands in one that it freezes after initialization).
pub fn rotor_init_in(
    self_id: NodeId,
    session: Option<u64>,
    registry: SenderRegistry,
) -> (RotorState, Vec<Outgoing>) {
    let st = RotorState {
        self_id,
        session,
        registry,
        candidates: BTreeSet::new(),
        selected: BTreeSet::new(),
        pending: BTreeSet::new(),
        iteration: 0,
        prev_coordinator: None,
        stage: Stage::AwaitInits,
    };
    let out = vec![Outgoing::broadcast(st.payload(Kind::Init))];
    (st, out)
}

/// True for payloads the rotor consumes: `init`, `echo(p)` and untagged-instance
/// `opinion` messages of the given session.
pub fn is_rotor_payload(p: &Payload, session: Option<u64>) -> bool {
    p.tag.session == session
        && p.tag.instance.is_none()
        && matches!(p.kind, Kind::Init | Kind::Echo { body: None, .. } | Kind::Opinion(_))
}

impl RotorState {
    fn payload(&self, kind: Kind) -> Payload {
        Payload::tagged(Tag { session: self.session, instance: None }, kind)
    }

    pub fn self_id(&self) -> NodeId {
        self.self_id
    }

    pub fn candidates(&self) -> &BTreeSet<NodeId> {
        &self.candidates
    }

    pub fn selected(&self) -> &BTreeSet<NodeId> {
        &self.selected
    }

    pub fn registry(&self) -> &SenderRegistry {
        &self.registry
    }

    pub fn set_registry(&mut self, registry: SenderRegistry) {
        self.registry = registry;
    }

    /// Loop iterations started so far.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn terminated(&self) -> bool {
        self.stage == Stage::Done
    }

    pub fn in_loop(&self) -> bool {
        self.stage == Stage::Loop
    }

    /// Round 2: echo every id we received `init` from.
    pub fn echo_inits(&mut self, inbox: &RoundInbox) -> Result<Vec<Outgoing>, ProtocolError> {
        if self.stage != Stage::AwaitInits {
            return Err(ProtocolError::Invariant {
                node: self.self_id,
                what: "rotor initialization replayed".into(),
            });
        }
        let inbox = self.registry.absorb(inbox);
        let mut out = Vec::new();
        for (from, p) in inbox.iter() {
            if p.kind == Kind::Init && is_rotor_payload(p, self.session) {
                out.push(Outgoing::broadcast(
                    self.payload(Kind::Echo { origin: from, body: None }),
                ));
            }
        }
        self.stage = Stage::Loop;
        Ok(out)
    }

    /// One loop iteration. `opinions` supplies what to broadcast if this node
    /// is the selected coordinator.
    pub fn iterate(
        &mut self,
        inbox: &RoundInbox,
        opinions: impl FnOnce() -> Vec<Payload>,
    ) -> Result<Step<RotorEvent>, ProtocolError> {
        if self.stage != Stage::Loop {
            return Err(ProtocolError::Invariant {
                node: self.self_id,
                what: format!("rotor iteration in stage {:?}", self.stage),
            });
        }
        let r = self.iteration;
        let mut step = Step::default();
        self.pending.clear();
        let inbox = self.registry.absorb(inbox);
        let n_v = self.registry.n();

        let mut echoes: std::collections::BTreeMap<NodeId, usize> = Default::default();
        for (_, p) in inbox.iter() {
            if let Kind::Echo { origin, body: None } = p.kind {
                if is_rotor_payload(p, self.session) {
                    *echoes.entry(origin).or_default() += 1;
                }
            }
        }
        for (&p, &c) in &echoes {
            if !self.candidates.contains(&p) && ge_one_third(c, n_v)? {
                self.pending.insert(self.payload(Kind::Echo { origin: p, body: None }));
            }
        }
        for (&p, &c) in &echoes {
            if !self.candidates.contains(&p) && ge_two_thirds(c, n_v)? {
                self.candidates.insert(p);
                step.events.push(RotorEvent::CandidateAdded { id: p, iteration: r });
            }
        }

        if self.candidates.is_empty() {
            return Err(ProtocolError::Invariant {
                node: self.self_id,
                what: "no candidate coordinator to select".into(),
            });
        }
        let idx = (r % self.candidates.len() as u64) as usize;
        let p = *self.candidates.iter().nth(idx).expect("index within bounds");
        step.events.push(RotorEvent::Selected { coordinator: p, iteration: r });

        if let Some(prev) = self.prev_coordinator {
            let accepted = inbox
                .from_sender(prev)
                .filter(|q| is_rotor_payload(q, self.session))
                .filter_map(|q| match q.kind {
                    Kind::Opinion(x) => Some(x),
                    _ => None,
                })
                .min();
            if let Some(value) = accepted {
                step.events.push(RotorEvent::OpinionAccepted { from: prev, value, iteration: r });
            }
        }

        if self.selected.contains(&p) {
            self.stage = Stage::Done;
            step.events.push(RotorEvent::Terminated { iteration: r });
            return Ok(step);
        }
        self.selected.insert(p);
        if p == self.self_id {
            self.pending.extend(opinions());
        }
        step.out = self.pending.iter().cloned().map(Outgoing::broadcast).collect();
        self.prev_coordinator = Some(p);
        self.iteration += 1;
        Ok(step)
    }

    /// Standalone driver: round 2 echoes inits, every later round is one loop
    /// iteration with `own_opinion` as this node's opinion.
    pub fn step(
        &mut self,
        round: u64,
        inbox: &RoundInbox,
        own_opinion: Value,
    ) -> Result<Step<RotorEvent>, ProtocolError> {
        match (round, self.stage) {
            (2, Stage::AwaitInits) => Ok(Step { out: self.echo_inits(inbox)?, events: vec![] }),
            (r, Stage::Loop) if r >= 3 => {
                let opinion = self.payload(Kind::Opinion(own_opinion));
                self.iterate(inbox, || vec![opinion])
            }
            (_, Stage::Done) => Err(ProtocolError::AfterTermination(self.self_id)),
            (r, _) => Err(ProtocolError::OutOfOrder { expected: 2 + self.iteration + 1, got: r }),
        }
    }
}
