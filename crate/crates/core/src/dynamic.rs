//! Total ordering of events in a network whose membership changes over time.
//!
//! Every loop round `r` starts a parallel-consensus run (session `r`) over the
//! events heard in round `r - 1`, keyed by submitter. A run's messages are
//! only accepted from the members that were in `S` when it started. Round
//! `r'` becomes final once `2(r - r') > 5|S^{r'}| + 4`, and the chain is the
//! output of every final run, ordered by (run round, submitter).
//!
//! A node's `r` always equals the global round minus one.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Kind, NodeId, Outgoing, Payload, ProtocolError, RoundInbox, Step, Tag, Value};
use crate::parallel::{pc_start, PcState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChainEntry {
    pub round: u64,
    pub submitter: NodeId,
    pub event: Value,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DtoError {
    #[error("no ack round holds a strict majority")]
    JoinFailed,
    #[error("node {0} asked to leave twice")]
    AlreadyLeaving(NodeId),
    #[error("node {0} asked to leave before joining")]
    NotJoined(NodeId),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Round number and initial membership from the acks a joiner received.
/// Each entry is one `(ack round, sender)` delivery.
pub fn join(acks: &[(u64, NodeId)]) -> Result<(u64, BTreeSet<NodeId>), DtoError> {
    let mut votes: BTreeMap<u64, usize> = BTreeMap::new();
    for &(r, _) in acks {
        *votes.entry(r).or_default() += 1;
    }
    let (&r0, _) = votes
        .iter()
        .find(|(_, &c)| 2 * c > acks.len())
        .ok_or(DtoError::JoinFailed)?;
    Ok((r0 + 1, acks.iter().map(|&(_, u)| u).collect()))
}

/// `r'` is final at `r` iff `r - r' > 5s/2 + 2`, in integers.
pub fn is_final(r: u64, r_prime: u64, snapshot_size: usize) -> bool {
    r >= r_prime && 2 * (r - r_prime) > 5 * snapshot_size as u64 + 4
}

/// First loop round at which `r'` is final.
pub fn final_at(r_prime: u64, snapshot_size: usize) -> u64 {
    r_prime + (5 * snapshot_size as u64 + 4) / 2 + 1
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DtoEvent {
    Joined { round: u64, r: u64, members: usize },
    InstanceStarted { session: u64, members: usize, inputs: usize },
    InstanceDone { session: u64, round: u64 },
    /// Every session up to `upto` is final.
    Final { upto: u64 },
    Appended { entry: ChainEntry },
    Leaving { round: u64 },
    Halted { round: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    Joining { started: u64 },
    Active,
    Draining,
    Halted,
}

#[derive(Clone, Debug)]
struct Instance {
    pc: PcState,
    start: u64,
}

#[derive(Clone, Debug)]
pub struct DtoState {
    self_id: NodeId,
    stage: Stage,
    /// Global round of the last step.
    global: u64,
    r: u64,
    members: BTreeSet<NodeId>,
    buffered: BTreeSet<NodeId>,
    snapshots: BTreeMap<u64, BTreeSet<NodeId>>,
    running: BTreeMap<u64, Instance>,
    outputs: BTreeMap<u64, Vec<(NodeId, Value)>>,
    done_at: BTreeMap<u64, u64>,
    final_upto: Option<u64>,
    chain: Vec<ChainEntry>,
    chained_upto: Option<u64>,
    leave_requested: bool,
}

impl DtoState {
    fn blank(self_id: NodeId, stage: Stage, global: u64) -> Self {
        DtoState {
            self_id,
            stage,
            global,
            r: 0,
            members: BTreeSet::from([self_id]),
            buffered: BTreeSet::new(),
            snapshots: BTreeMap::new(),
            running: BTreeMap::new(),
            outputs: BTreeMap::new(),
            done_at: BTreeMap::new(),
            final_upto: None,
            chain: Vec::new(),
            chained_upto: None,
            leave_requested: false,
        }
    }

    /// Member of the initial network: announces itself in round 1 and enters
    /// the loop in round 2.
    pub fn genesis(self_id: NodeId) -> (DtoState, Vec<Outgoing>) {
        let st = DtoState::blank(self_id, Stage::Active, 1);
        (st, vec![Outgoing::broadcast(Payload::new(Kind::Present))])
    }

    /// Joins at global round `round`: announces itself, collects acks two
    /// rounds later and enters the loop the round after that.
    pub fn joiner(self_id: NodeId, round: u64) -> (DtoState, Vec<Outgoing>) {
        let st = DtoState::blank(self_id, Stage::Joining { started: round }, round);
        (st, vec![Outgoing::broadcast(Payload::new(Kind::Present))])
    }

    pub fn self_id(&self) -> NodeId {
        self.self_id
    }

    pub fn r(&self) -> u64 {
        self.r
    }

    pub fn in_loop(&self) -> bool {
        matches!(self.stage, Stage::Active | Stage::Draining) && self.r > 0
    }

    pub fn joining(&self) -> bool {
        matches!(self.stage, Stage::Joining { .. })
    }

    pub fn draining(&self) -> bool {
        self.stage == Stage::Draining
    }

    pub fn halted(&self) -> bool {
        self.stage == Stage::Halted
    }

    pub fn members(&self) -> &BTreeSet<NodeId> {
        &self.members
    }

    pub fn snapshots(&self) -> &BTreeMap<u64, BTreeSet<NodeId>> {
        &self.snapshots
    }

    /// Global round in which each session's run terminated here.
    pub fn done_at(&self) -> &BTreeMap<u64, u64> {
        &self.done_at
    }

    pub fn outputs(&self) -> &BTreeMap<u64, Vec<(NodeId, Value)>> {
        &self.outputs
    }

    pub fn running(&self) -> impl Iterator<Item = u64> + '_ {
        self.running.keys().copied()
    }

    pub fn final_upto(&self) -> Option<u64> {
        self.final_upto
    }

    /// Last session whose outputs are in the chain.
    pub fn chained_upto(&self) -> Option<u64> {
        self.chained_upto
    }

    pub fn chain(&self) -> &[ChainEntry] {
        &self.chain
    }

    /// Schedules `absent` for the next step.
    pub fn leave(&mut self) -> Result<(), DtoError> {
        match self.stage {
            Stage::Joining { .. } => Err(DtoError::NotJoined(self.self_id)),
            _ if self.leave_requested => Err(DtoError::AlreadyLeaving(self.self_id)),
            _ => {
                self.leave_requested = true;
                Ok(())
            }
        }
    }

    /// One global round. `event` is an event this node witnessed this round.
    pub fn step(
        &mut self,
        round: u64,
        inbox: &RoundInbox,
        event: Option<Value>,
    ) -> Result<Step<DtoEvent>, DtoError> {
        if round != self.global + 1 {
            return Err(ProtocolError::OutOfOrder { expected: self.global + 1, got: round }.into());
        }
        self.global = round;
        let mut step = Step::default();
        match self.stage {
            Stage::Halted => return Err(ProtocolError::AfterTermination(self.self_id).into()),
            Stage::Joining { started } => {
                self.collect_joiner(round, started, inbox, &mut step)?;
                return Ok(step);
            }
            Stage::Active | Stage::Draining => {}
        }

        self.r += 1;
        let r = self.r;
        let untagged = |p: &Payload| p.tag == Tag::default();

        for (u, p) in inbox.iter() {
            if u != self.self_id && untagged(p) && p.kind == Kind::Present {
                self.members.insert(u);
                step.out.push(Outgoing::to(u, Payload::new(Kind::Ack(r))));
            }
        }
        if self.leave_requested && self.stage == Stage::Active {
            self.stage = Stage::Draining;
            step.out.push(Outgoing::broadcast(Payload::new(Kind::Absent)));
            step.events.push(DtoEvent::Leaving { round });
        }
        for (u, p) in inbox.iter() {
            if u != self.self_id && untagged(p) && p.kind == Kind::Absent {
                self.members.remove(&u);
            }
        }
        if self.stage == Stage::Active {
            if let Some(m) = event.filter(|m| !m.is_bot()) {
                step.out.push(Outgoing::broadcast(Payload::new(Kind::Event { body: m, round: r })));
            }
        }

        // Split the inbox by session once; each run only sees its members.
        let mut by_session: BTreeMap<u64, RoundInbox> = BTreeMap::new();
        for (u, p) in inbox.iter() {
            if let Some(s) = p.tag.session {
                if self.snapshots.get(&s).is_some_and(|m| m.contains(&u)) {
                    by_session.entry(s).or_default().insert(u, p.clone());
                }
            }
        }
        let empty = RoundInbox::new();
        let sessions: Vec<u64> = self.running.keys().copied().collect();
        for s in sessions {
            let inst = self.running.get_mut(&s).expect("listed");
            let local = round - inst.start + 1;
            let ps = inst.pc.step(local, by_session.get(&s).unwrap_or(&empty))?;
            step.out.extend(ps.out);
            if inst.pc.finished().is_some() {
                let out: Vec<(NodeId, Value)> =
                    inst.pc.outputs().map(|(id, v)| (NodeId(id), v)).collect();
                self.outputs.insert(s, out);
                self.done_at.insert(s, round);
                self.running.remove(&s);
                step.events.push(DtoEvent::InstanceDone { session: s, round });
            }
        }

        if self.stage == Stage::Active {
            let mut pairs: BTreeMap<NodeId, Value> = BTreeMap::new();
            for (u, p) in inbox.iter() {
                if let (true, Kind::Event { body, round: er }) = (untagged(p), &p.kind) {
                    if *er + 1 == r && !body.is_bot() && self.members.contains(&u) {
                        pairs.entry(u).and_modify(|m| *m = (*m).min(*body)).or_insert(*body);
                    }
                }
            }
            let inputs: Vec<(u64, Value)> = pairs.iter().map(|(u, m)| (u.0, *m)).collect();
            let (pc, out) = pc_start(self.self_id, &inputs, Some(r))
                .map_err(|e| ProtocolError::Config(e.to_string()))?;
            step.out.extend(out);
            self.snapshots.insert(r, self.members.clone());
            self.running.insert(r, Instance { pc, start: round });
            step.events.push(DtoEvent::InstanceStarted {
                session: r,
                members: self.members.len(),
                inputs: inputs.len(),
            });
        }

        self.advance_finality(&mut step);

        if self.stage == Stage::Draining && self.running.is_empty() {
            self.stage = Stage::Halted;
            step.events.push(DtoEvent::Halted { round });
        }
        Ok(step)
    }

    fn collect_joiner(
        &mut self,
        round: u64,
        started: u64,
        inbox: &RoundInbox,
        step: &mut Step<DtoEvent>,
    ) -> Result<(), DtoError> {
        for (u, p) in inbox.iter() {
            if p.tag == Tag::default() && p.kind == Kind::Present {
                self.buffered.insert(u);
            }
        }
        if round == started + 2 {
            let acks: Vec<(u64, NodeId)> = inbox
                .iter()
                .filter_map(|(u, p)| match p.kind {
                    Kind::Ack(r) if p.tag == Tag::default() => Some((r, u)),
                    _ => None,
                })
                .collect();
            let (r, senders) = join(&acks)?;
            self.r = r;
            self.members.extend(senders);
            self.members.extend(std::mem::take(&mut self.buffered));
            self.stage = Stage::Active;
            step.events.push(DtoEvent::Joined { round, r, members: self.members.len() });
        }
        Ok(())
    }

    fn advance_finality(&mut self, step: &mut Step<DtoEvent>) {
        let r = self.r;
        let from = self.final_upto.map_or_else(
            || self.snapshots.keys().next().copied(),
            |u| Some(u + 1),
        );
        let mut upto = self.final_upto;
        if let Some(from) = from {
            for (&s, members) in self.snapshots.range(from..) {
                if !is_final(r, s, members.len()) {
                    break;
                }
                upto = Some(s);
            }
        }
        if upto != self.final_upto {
            self.final_upto = upto;
            step.events.push(DtoEvent::Final { upto: upto.expect("advanced") });
        }
        // The chain only grows through runs that have terminated here, so it
        // stays append-only even if finality outruns termination.
        let Some(upto) = self.final_upto else { return };
        let from = self.chained_upto.map_or(0, |c| c + 1);
        if from > upto {
            return;
        }
        for &s in self.snapshots.range(from..=upto).map(|(s, _)| s) {
            let Some(out) = self.outputs.get(&s) else { break };
            for &(submitter, event) in out {
                let entry = ChainEntry { round: s, submitter, event };
                self.chain.push(entry);
                step.events.push(DtoEvent::Appended { entry });
            }
            self.chained_upto = Some(s);
        }
    }
}
