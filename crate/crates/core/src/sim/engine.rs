//! Lockstep round engine. Correct nodes run their state machine; Byzantine
//! nodes run the same state machine as a shadow whose outbox the adversary
//! may rewrite, drop or extend before delivery.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::model::{Dest, NodeId, Outgoing, Payload, ProtocolError, RoundInbox};

pub trait Process {
    fn id(&self) -> NodeId;
    /// Called once per round from the node's start round on. The inbox holds
    /// what was delivered this round (empty in the start round).
    fn on_round(&mut self, round: u64, inbox: &RoundInbox) -> Result<Vec<Outgoing>, ProtocolError>;
    fn is_halted(&self) -> bool;
}

/// One Byzantine message, addressed to a single recipient.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Injection {
    pub from: NodeId,
    pub dest: NodeId,
    pub payload: Payload,
}

/// What the adversary sees before choosing this round's Byzantine messages.
pub struct View<'a> {
    pub round: u64,
    /// Every node the engine knows, started or not.
    pub all: &'a [NodeId],
    /// Nodes currently running (started, not halted).
    pub active: &'a BTreeSet<NodeId>,
    pub byzantine: &'a BTreeSet<NodeId>,
    /// Correct nodes' outboxes for this round.
    pub correct: &'a BTreeMap<NodeId, Vec<Outgoing>>,
    /// What each Byzantine node's shadow would send if it were correct.
    pub shadow: &'a BTreeMap<NodeId, Vec<Outgoing>>,
}

impl View<'_> {
    /// Recipients of `dest` this round, as the engine would resolve them.
    pub fn recipients(&self, dest: Dest) -> Vec<NodeId> {
        match dest {
            Dest::All => self.active.iter().copied().collect(),
            Dest::To(v) => vec![v],
        }
    }
}

pub trait Adversary {
    fn act(&mut self, view: &View<'_>) -> Vec<Injection>;
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("adversary tried to send as {from}, which is not a Byzantine node")]
    Forged { from: NodeId },
    #[error("node {node} failed in round {round}: {source}")]
    Protocol { node: NodeId, round: u64, source: ProtocolError },
    #[error("duplicate node id {0}")]
    DuplicateId(NodeId),
}

/// One delivered message, in the trace dump's field order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub round: u64,
    pub sender: NodeId,
    pub recipient: NodeId,
    pub payload: Payload,
}

impl TraceRecord {
    pub fn line(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.round, self.sender, self.recipient, self.payload)
    }
}

pub type DelayFn = Box<dyn Fn(NodeId, NodeId, u64) -> u64 + Send>;

pub struct Slot<P> {
    pub proc: P,
    pub start: u64,
    pub byzantine: bool,
    pub halted_at: Option<u64>,
}

pub struct Engine<P: Process> {
    slots: Vec<Slot<P>>,
    ids: Vec<NodeId>,
    byzantine: BTreeSet<NodeId>,
    pending: BTreeMap<u64, BTreeMap<NodeId, RoundInbox>>,
    delay: Option<DelayFn>,
    round: u64,
    messages: u64,
    trace: Option<Vec<TraceRecord>>,
    last_outbox: BTreeMap<NodeId, Vec<Outgoing>>,
}

impl<P: Process> Engine<P> {
    /// `nodes` are `(process, start round, byzantine)`.
    pub fn new(nodes: Vec<(P, u64, bool)>) -> Result<Self, EngineError> {
        let mut seen = BTreeSet::new();
        let mut byzantine = BTreeSet::new();
        let mut slots = Vec::new();
        for (proc, start, byz) in nodes {
            let id = proc.id();
            if !seen.insert(id) {
                return Err(EngineError::DuplicateId(id));
            }
            if byz {
                byzantine.insert(id);
            }
            slots.push(Slot { proc, start: start.max(1), byzantine: byz, halted_at: None });
        }
        let ids = slots.iter().map(|s| s.proc.id()).collect();
        Ok(Engine {
            slots,
            ids,
            byzantine,
            pending: BTreeMap::new(),
            delay: None,
            round: 0,
            messages: 0,
            trace: None,
            last_outbox: BTreeMap::new(),
        })
    }

    /// Per-edge delivery delay in rounds (at least 1).
    pub fn with_delay(mut self, delay: DelayFn) -> Self {
        self.delay = Some(delay);
        self
    }

    pub fn record_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn messages(&self) -> u64 {
        self.messages
    }

    pub fn slots(&self) -> &[Slot<P>] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut [Slot<P>] {
        &mut self.slots
    }

    pub fn byzantine(&self) -> &BTreeSet<NodeId> {
        &self.byzantine
    }

    pub fn take_trace(&mut self) -> Option<Vec<TraceRecord>> {
        self.trace.take()
    }

    /// Outboxes produced in the last round, after the adversary acted, keyed
    /// by sender. Byzantine entries are what was actually sent.
    pub fn last_outbox(&self) -> &BTreeMap<NodeId, Vec<Outgoing>> {
        &self.last_outbox
    }

    fn running(&self, slot: &Slot<P>, round: u64) -> bool {
        slot.start <= round && slot.halted_at.is_none()
    }

    /// Runs one round.
    pub fn step(&mut self, adversary: &mut dyn Adversary) -> Result<(), EngineError> {
        self.round += 1;
        let round = self.round;
        let mut inboxes = self.pending.remove(&round).unwrap_or_default();
        let active: BTreeSet<NodeId> = self
            .slots
            .iter()
            .filter(|s| self.running(s, round))
            .map(|s| s.proc.id())
            .collect();

        let mut correct = BTreeMap::new();
        let mut shadow = BTreeMap::new();
        let empty = RoundInbox::new();
        for slot in self.slots.iter_mut() {
            if !(slot.start <= round && slot.halted_at.is_none()) {
                continue;
            }
            let id = slot.proc.id();
            let inbox = inboxes.remove(&id);
            let res = slot.proc.on_round(round, inbox.as_ref().unwrap_or(&empty));
            if slot.byzantine {
                // A shadow fed with adversarial traffic may break; the
                // Byzantine node then simply has nothing honest to imitate.
                match res {
                    Ok(out) => {
                        shadow.insert(id, out);
                    }
                    Err(_) => slot.halted_at = Some(round),
                }
            } else {
                let out = res.map_err(|source| EngineError::Protocol { node: id, round, source })?;
                correct.insert(id, out);
            }
        }

        let injections = adversary.act(&View {
            round,
            all: &self.ids,
            active: &active,
            byzantine: &self.byzantine,
            correct: &correct,
            shadow: &shadow,
        });

        let mut sent: Vec<(NodeId, NodeId, Payload)> = Vec::new();
        for (&from, outs) in &correct {
            for o in outs {
                match o.dest {
                    Dest::All => sent.extend(active.iter().map(|&v| (from, v, o.payload.clone()))),
                    Dest::To(v) => sent.push((from, v, o.payload.clone())),
                }
            }
        }
        let mut byz_out: BTreeMap<NodeId, Vec<Outgoing>> = BTreeMap::new();
        for inj in injections {
            if !self.byzantine.contains(&inj.from) {
                return Err(EngineError::Forged { from: inj.from });
            }
            byz_out.entry(inj.from).or_default().push(Outgoing::to(inj.dest, inj.payload.clone()));
            sent.push((inj.from, inj.dest, inj.payload));
        }

        for (from, to, payload) in sent {
            let d = self.delay.as_ref().map_or(1, |f| f(from, to, round).max(1));
            let at = round + d;
            let fresh = self
                .pending
                .entry(at)
                .or_default()
                .entry(to)
                .or_default()
                .insert(from, payload.clone());
            if fresh {
                self.messages += 1;
                if let Some(t) = self.trace.as_mut() {
                    t.push(TraceRecord { round, sender: from, recipient: to, payload });
                }
            }
        }

        for slot in self.slots.iter_mut() {
            if slot.halted_at.is_none() && slot.start <= round && slot.proc.is_halted() {
                slot.halted_at = Some(round);
            }
        }
        self.last_outbox = correct;
        self.last_outbox.extend(byz_out);
        Ok(())
    }
}
