//! Shared vocabulary: identifiers, values, payloads, per-round inboxes, sender
//! registries and the threshold arithmetic every protocol uses.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Exact rational used by approximate agreement.
pub type Rational = Ratio<i128>;

/// Label of a parallel-consensus instance.
pub type InstanceId = u64;

/// Opaque node label. Labels are unique but need not be consecutive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A totally ordered scalar opinion. `Bot` sorts below every application value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "Option<i64>", into = "Option<i64>")]
pub enum Value {
    Bot,
    Val(i64),
}

impl Value {
    pub fn is_bot(self) -> bool {
        matches!(self, Value::Bot)
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Val(v)
    }
}

impl From<Option<i64>> for Value {
    fn from(v: Option<i64>) -> Self {
        v.map_or(Value::Bot, Value::Val)
    }
}

impl From<Value> for Option<i64> {
    fn from(v: Value) -> Self {
        match v {
            Value::Bot => None,
            Value::Val(x) => Some(x),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bot => write!(f, "bot"),
            Value::Val(v) => write!(f, "{v}"),
        }
    }
}

/// Namespacing carried by instance messages. `session` is the dynamic-ordering
/// round that started a parallel-consensus run; `instance` is the pair id
/// inside that run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Tag {
    pub session: Option<u64>,
    pub instance: Option<InstanceId>,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Kind {
    Present,
    Init,
    /// The original `(m, s)` broadcast of reliable broadcast; `s` is the sender.
    Message(Value),
    /// `echo(m, s)` in reliable broadcast (`body = Some(m)`), `echo(p)` in the
    /// rotor (`body = None`).
    Echo { origin: NodeId, body: Option<Value> },
    Opinion(Value),
    Input(Value),
    Prefer(Value),
    StrongPrefer(Value),
    NoPreference,
    NoStrongPreference,
    Ack(u64),
    Absent,
    Event { body: Value, round: u64 },
    Estimate(Rational),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Payload {
    pub tag: Tag,
    pub kind: Kind,
}

impl Payload {
    pub fn new(kind: Kind) -> Self {
        Payload { tag: Tag::default(), kind }
    }

    pub fn tagged(tag: Tag, kind: Kind) -> Self {
        Payload { tag, kind }
    }

    /// Rewrites every scalar carried by the payload. Used by adversaries.
    pub fn map_values(
        &self,
        f: &mut dyn FnMut(Value) -> Value,
        q: &mut dyn FnMut(Rational) -> Rational,
    ) -> Payload {
        let kind = match &self.kind {
            Kind::Message(v) => Kind::Message(f(*v)),
            Kind::Echo { origin, body } => Kind::Echo { origin: *origin, body: body.map(&mut *f) },
            Kind::Opinion(v) => Kind::Opinion(f(*v)),
            Kind::Input(v) => Kind::Input(f(*v)),
            Kind::Prefer(v) => Kind::Prefer(f(*v)),
            Kind::StrongPrefer(v) => Kind::StrongPrefer(f(*v)),
            Kind::Event { body, round } => Kind::Event { body: f(*body), round: *round },
            Kind::Estimate(x) => Kind::Estimate(q(*x)),
            other => other.clone(),
        };
        Payload { tag: self.tag, kind }
    }
}

impl fmt::Display for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(s) = self.tag.session {
            write!(f, "s{s}:")?;
        }
        if let Some(i) = self.tag.instance {
            write!(f, "{i}:")?;
        }
        match &self.kind {
            Kind::Present => write!(f, "present"),
            Kind::Init => write!(f, "init"),
            Kind::Message(v) => write!(f, "msg({v})"),
            Kind::Echo { origin, body: Some(b) } => write!(f, "echo({b},{origin})"),
            Kind::Echo { origin, body: None } => write!(f, "echo({origin})"),
            Kind::Opinion(v) => write!(f, "opinion({v})"),
            Kind::Input(v) => write!(f, "input({v})"),
            Kind::Prefer(v) => write!(f, "prefer({v})"),
            Kind::StrongPrefer(v) => write!(f, "strongprefer({v})"),
            Kind::NoPreference => write!(f, "nopreference"),
            Kind::NoStrongPreference => write!(f, "nostrongpreference"),
            Kind::Ack(r) => write!(f, "ack({r})"),
            Kind::Absent => write!(f, "absent"),
            Kind::Event { body, round } => write!(f, "event({body},{round})"),
            Kind::Estimate(q) => write!(f, "estimate({q})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Dest {
    All,
    To(NodeId),
}

/// A payload leaving a node this round.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Outgoing {
    pub dest: Dest,
    pub payload: Payload,
}

impl Outgoing {
    pub fn broadcast(payload: Payload) -> Self {
        Outgoing { dest: Dest::All, payload }
    }

    pub fn to(node: NodeId, payload: Payload) -> Self {
        Outgoing { dest: Dest::To(node), payload }
    }
}

/// A delivered message. `sender` is the true origin; the engine never lets it
/// be forged.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub sender: NodeId,
    pub round_sent: u64,
    pub payload: Payload,
}

/// Output of one state-machine step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Step<E> {
    pub out: Vec<Outgoing>,
    pub events: Vec<E>,
}

impl<E> Default for Step<E> {
    fn default() -> Self {
        Step { out: Vec::new(), events: Vec::new() }
    }
}

/// Payloads delivered in one round, grouped by sender. Identical
/// `(sender, payload)` pairs collapse to one copy.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RoundInbox {
    by_sender: BTreeMap<NodeId, BTreeSet<Payload>>,
}

impl RoundInbox {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns false if the pair was already present.
    pub fn insert(&mut self, sender: NodeId, payload: Payload) -> bool {
        self.by_sender.entry(sender).or_default().insert(payload)
    }

    pub fn from_envelopes<'a>(envs: impl IntoIterator<Item = &'a Envelope>) -> Self {
        let mut inbox = RoundInbox::new();
        for e in envs {
            inbox.insert(e.sender, e.payload.clone());
        }
        inbox
    }

    pub fn senders(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.by_sender.keys().copied()
    }

    pub fn from_sender(&self, sender: NodeId) -> impl Iterator<Item = &Payload> {
        self.by_sender.get(&sender).into_iter().flatten()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Payload)> {
        self.by_sender.iter().flat_map(|(s, ps)| ps.iter().map(move |p| (*s, p)))
    }

    pub fn is_empty(&self) -> bool {
        self.by_sender.is_empty()
    }

    /// Number of (sender, payload) pairs.
    pub fn len(&self) -> usize {
        self.by_sender.values().map(BTreeSet::len).sum()
    }

    pub fn retain(&mut self, mut keep: impl FnMut(NodeId, &Payload) -> bool) {
        for (s, ps) in self.by_sender.iter_mut() {
            ps.retain(|p| keep(*s, p));
        }
        self.by_sender.retain(|_, ps| !ps.is_empty());
    }

    pub fn filtered(&self, mut keep: impl FnMut(NodeId, &Payload) -> bool) -> RoundInbox {
        let mut out = self.clone();
        out.retain(|s, p| keep(s, p));
        out
    }

    pub fn extend(&mut self, other: &RoundInbox) {
        for (s, p) in other.iter() {
            self.insert(s, p.clone());
        }
    }

    /// Distinct senders that delivered at least one payload matching `pred`.
    pub fn count_senders(&self, mut pred: impl FnMut(&Payload) -> bool) -> usize {
        self.by_sender.values().filter(|ps| ps.iter().any(&mut pred)).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegistryMode {
    Growing,
    Frozen,
}

/// The `n_v` bookkeeping: distinct senders heard so far.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SenderRegistry {
    mode: RegistryMode,
    members: BTreeSet<NodeId>,
}

impl SenderRegistry {
    pub fn growing() -> Self {
        SenderRegistry { mode: RegistryMode::Growing, members: BTreeSet::new() }
    }

    pub fn frozen(members: BTreeSet<NodeId>) -> Self {
        SenderRegistry { mode: RegistryMode::Frozen, members }
    }

    pub fn mode(&self) -> RegistryMode {
        self.mode
    }

    pub fn members(&self) -> &BTreeSet<NodeId> {
        &self.members
    }

    pub fn n(&self) -> usize {
        self.members.len()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.members.contains(&id)
    }

    pub fn freeze(&mut self) {
        self.mode = RegistryMode::Frozen;
    }

    /// Growing: adds every inbox sender and returns the inbox unchanged.
    /// Frozen: leaves membership alone and returns the inbox without
    /// envelopes from non-members.
    pub fn absorb(&mut self, inbox: &RoundInbox) -> RoundInbox {
        match self.mode {
            RegistryMode::Growing => {
                self.members.extend(inbox.senders());
                inbox.clone()
            }
            RegistryMode::Frozen => inbox.filtered(|s, _| self.members.contains(&s)),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("threshold evaluated against an empty population")]
    EmptyPopulation,
}

/// `count >= n/3`, evaluated as `3*count >= n`.
pub fn ge_one_third(count: usize, n: usize) -> Result<bool, ModelError> {
    if n == 0 {
        return Err(ModelError::EmptyPopulation);
    }
    Ok(3 * count as u128 >= n as u128)
}

/// `count >= 2n/3`, evaluated as `3*count >= 2n`.
pub fn ge_two_thirds(count: usize, n: usize) -> Result<bool, ModelError> {
    if n == 0 {
        return Err(ModelError::EmptyPopulation);
    }
    Ok(3 * count as u128 >= 2 * n as u128)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("round {got} stepped out of order (expected {expected})")]
    OutOfOrder { expected: u64, got: u64 },
    #[error("node {0} stepped after termination")]
    AfterTermination(NodeId),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invariant breach at node {node}: {what}")]
    Invariant { node: NodeId, what: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Among values whose count satisfies `pass`, picks the highest count, then
/// the smallest value.
pub(crate) fn pick_quorum(
    counts: &BTreeMap<Value, usize>,
    mut pass: impl FnMut(usize) -> Result<bool, ModelError>,
) -> Result<Option<Value>, ModelError> {
    let mut best: Option<(usize, Value)> = None;
    for (&v, &c) in counts {
        if pass(c)? && best.is_none_or(|(bc, _)| c > bc) {
            best = Some((c, v));
        }
    }
    Ok(best.map(|(_, v)| v))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(kind: Kind) -> Payload {
        Payload::new(kind)
    }

    #[test]
    fn threshold_examples() {
        assert!(ge_one_third(2, 4).unwrap());
        assert!(!ge_one_third(1, 4).unwrap());
        assert!(ge_one_third(1, 3).unwrap());
        assert!(ge_two_thirds(3, 4).unwrap());
        assert!(!ge_two_thirds(2, 4).unwrap());
        assert!(ge_two_thirds(2, 3).unwrap());
        assert_eq!(ge_one_third(0, 0), Err(ModelError::EmptyPopulation));
        assert_eq!(ge_two_thirds(5, 0), Err(ModelError::EmptyPopulation));
    }

    #[test]
    fn thresholds_match_rationals_exhaustively() {
        for n in 1..=300usize {
            for c in 0..=n {
                let third = Ratio::new(n as i64, 3);
                let two = Ratio::new(2 * n as i64, 3);
                let c = c as i64;
                assert_eq!(ge_one_third(c as usize, n).unwrap(), Ratio::from_integer(c) >= third);
                assert_eq!(ge_two_thirds(c as usize, n).unwrap(), Ratio::from_integer(c) >= two);
            }
        }
    }

    #[test]
    fn absorb_examples() {
        let (a, b, c) = (NodeId(1), NodeId(7), NodeId(30));
        let mut inbox = RoundInbox::new();
        inbox.insert(b, p(Kind::Present));
        inbox.insert(c, p(Kind::Present));

        let mut g = SenderRegistry::frozen([a].into());
        g.mode = RegistryMode::Growing;
        let seen = g.absorb(&inbox);
        assert_eq!(g.n(), 3);
        assert_eq!(seen, inbox);

        let mut fr = SenderRegistry::frozen([a, b].into());
        let mut only_c = RoundInbox::new();
        only_c.insert(c, p(Kind::Init));
        let kept = fr.absorb(&only_c);
        assert!(kept.is_empty());
        assert_eq!(fr.members(), &[a, b].into());

        let mut g2 = SenderRegistry::growing();
        g2.absorb(&inbox);
        let before = g2.clone();
        g2.absorb(&RoundInbox::new());
        assert_eq!(g2, before);
    }

    #[test]
    fn inbox_dedups_pairs_not_senders() {
        let mut inbox = RoundInbox::new();
        let s = NodeId(4);
        assert!(inbox.insert(s, p(Kind::Echo { origin: NodeId(1), body: None })));
        assert!(!inbox.insert(s, p(Kind::Echo { origin: NodeId(1), body: None })));
        assert!(inbox.insert(s, p(Kind::Echo { origin: NodeId(2), body: None })));
        assert_eq!(inbox.len(), 2);
        assert_eq!(inbox.count_senders(|_| true), 1);
    }

    #[test]
    fn bot_sorts_first() {
        assert!(Value::Bot < Value::Val(i64::MIN));
        let v: Value = serde_json::from_str("null").unwrap();
        assert_eq!(v, Value::Bot);
        assert_eq!(serde_json::to_string(&Value::Val(3)).unwrap(), "3");
    }

    #[test]
    fn pick_prefers_count_then_small_value() {
        let counts: BTreeMap<Value, usize> =
            [(Value::Val(1), 3), (Value::Val(0), 3), (Value::Val(5), 4)].into();
        assert_eq!(pick_quorum(&counts, |c| Ok(c >= 3)).unwrap(), Some(Value::Val(5)));
        let counts: BTreeMap<Value, usize> = [(Value::Val(1), 3), (Value::Val(0), 3)].into();
        assert_eq!(pick_quorum(&counts, |c| Ok(c >= 3)).unwrap(), Some(Value::Val(0)));
        assert_eq!(pick_quorum(&counts, |c| Ok(c >= 4)).unwrap(), None);
    }
}
