//! Exhaustive search over every schedule a small Byzantine adversary can
//! choose against reliable broadcast.
//!
//! Correct nodes are `1..=n-f`, Byzantine ones `n-f+1..=n`. With a correct
//! sender, node 1 broadcasts body `0`; otherwise node `n` is the sender. In
//! every round each Byzantine node picks, per correct recipient, a subset of
//! two payloads: the bodies `0` and `1` in round 1 (as sender) or its
//! presence (otherwise), and the echoes of both bodies afterwards. Joint
//! states are memoised, so the search visits each reachable configuration
//! once while still counting every leaf of the full schedule tree.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Kind, NodeId, Payload, ProtocolError, RoundInbox, Value};
use crate::rb::{rb_init, RbState};
use crate::sim::verdict::{Check, PropertyResult};

pub const MAX_N: usize = 5;
pub const MAX_HORIZON: u64 = 8;
/// Default refusal threshold on the number of schedules.
pub const DEFAULT_CAP: u128 = 1_000_000_000_000_000_000;

const BODIES: [Value; 2] = [Value::Val(0), Value::Val(1)];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploreParams {
    pub n: usize,
    pub f: usize,
    pub horizon: u64,
    pub byzantine_sender: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExploreError {
    #[error("state space too large: about {estimate} schedules (cap {cap}, n <= {MAX_N}, horizon <= {MAX_HORIZON})")]
    Cap { estimate: u128, cap: u128 },
    #[error("invalid parameters: {0}")]
    Invalid(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploreReport {
    pub params: ExploreParams,
    /// Leaves of the full schedule tree.
    pub branches: u128,
    /// Leaves whose schedule violates at least one property.
    pub violating_branches: u128,
    /// Distinct joint states expanded.
    pub states: u64,
    pub properties: Vec<PropertyResult>,
}

impl ExploreReport {
    pub fn passed(&self) -> bool {
        self.violating_branches == 0
    }
}

/// Number of schedules in the tree, saturating.
pub fn estimate(p: &ExploreParams) -> u128 {
    let g = p.n.saturating_sub(p.f) as u32;
    let slots = (p.f as u32).saturating_mul(g);
    let first: u128 = if p.byzantine_sender { 4 } else { 2 };
    let mut est = first.checked_pow(slots).unwrap_or(u128::MAX);
    for _ in 2..p.horizon {
        est = est.saturating_mul(4u128.checked_pow(slots).unwrap_or(u128::MAX));
    }
    est
}

pub fn explore_rb(p: ExploreParams, cap: u128) -> Result<ExploreReport, ExploreError> {
    if p.n == 0 || p.f == 0 || p.f >= p.n {
        return Err(ExploreError::Invalid(format!("need 0 < f < n, got n={} f={}", p.n, p.f)));
    }
    if p.horizon < 2 {
        return Err(ExploreError::Invalid("horizon must be at least 2".into()));
    }
    let est = estimate(&p);
    if p.n > MAX_N || p.horizon > MAX_HORIZON || est > cap {
        return Err(ExploreError::Cap { estimate: est, cap });
    }
    let g = p.n - p.f;
    let sender = if p.byzantine_sender { NodeId(p.n as u64) } else { NodeId(1) };
    let mut nodes = Vec::new();
    for i in 1..=g as u64 {
        let id = NodeId(i);
        let body = (id == sender).then_some(BODIES[0]);
        let (st, out) = rb_init(id, sender, body)?;
        nodes.push(Node { st, out: out.into_iter().map(|o| o.payload).collect() });
    }
    let mut x = Explorer {
        p,
        g,
        sender,
        byz: (g as u64 + 1..=p.n as u64).map(NodeId).collect(),
        memo: HashMap::new(),
        correctness: Check::new("correctness"),
        unforgeability: Check::new("unforgeability"),
        relay: Check::new("relay"),
    };
    let (branches, violating_branches) = x.visit(1, &nodes)?;
    Ok(ExploreReport {
        params: p,
        branches,
        violating_branches,
        states: x.memo.len() as u64,
        properties: vec![x.correctness.finish(), x.unforgeability.finish(), x.relay.finish()],
    })
}

#[derive(Clone)]
struct Node {
    st: RbState,
    /// What this node broadcast in the current round.
    out: Vec<Payload>,
}

struct Explorer {
    p: ExploreParams,
    g: usize,
    sender: NodeId,
    byz: Vec<NodeId>,
    memo: HashMap<Vec<u64>, (u128, u128)>,
    correctness: Check,
    unforgeability: Check,
    relay: Check,
}

fn enc_value(v: Value) -> u64 {
    match v {
        Value::Bot => u64::MAX,
        Value::Val(x) => x as u64,
    }
}

fn enc_payload(p: &Payload, key: &mut Vec<u64>) {
    match &p.kind {
        Kind::Present => key.push(1),
        Kind::Message(m) => key.extend([2, enc_value(*m)]),
        Kind::Echo { origin, body } => key.extend([3, origin.0, body.map_or(u64::MAX - 1, enc_value)]),
        other => unreachable!("reliable broadcast never sends {other:?}"),
    }
}

/// Everything that determines the rest of the run and the checks on it.
fn key(round: u64, nodes: &[Node]) -> Vec<u64> {
    let mut k = vec![round];
    for n in nodes {
        let reg = n.st.registry().members();
        k.push(reg.len() as u64);
        k.extend(reg.iter().map(|id| id.0));
        let acc: Vec<_> = n.st.accepted().collect();
        k.push(acc.len() as u64);
        for (s, m, _) in acc {
            k.extend([s.0, enc_value(m)]);
        }
        k.push(n.out.len() as u64);
        for p in &n.out {
            enc_payload(p, &mut k);
        }
    }
    k
}

fn accepted_set(st: &RbState) -> BTreeSet<(NodeId, Value)> {
    st.accepted().map(|(s, m, _)| (s, m)).collect()
}

impl Explorer {
    /// Payload sets one Byzantine node may send to one recipient in `round`.
    fn options(&self, round: u64, b: NodeId) -> Vec<Vec<Payload>> {
        let pair: [Payload; 2] = if round == 1 && b == self.sender {
            BODIES.map(|m| Payload::new(Kind::Message(m)))
        } else if round == 1 {
            return vec![vec![], vec![Payload::new(Kind::Present)]];
        } else {
            BODIES.map(|m| Payload::new(Kind::Echo { origin: self.sender, body: Some(m) }))
        };
        vec![vec![], vec![pair[0].clone()], vec![pair[1].clone()], pair.to_vec()]
    }

    /// `nodes` hold the state at the end of `round`. Returns the number of
    /// leaves below and how many of them violate something.
    fn visit(&mut self, round: u64, nodes: &[Node]) -> Result<(u128, u128), ExploreError> {
        if round == self.p.horizon {
            return Ok((1, 0));
        }
        let k = key(round, nodes);
        if let Some(&hit) = self.memo.get(&k) {
            return Ok(hit);
        }
        let options: Vec<Vec<Vec<Payload>>> = self.byz.iter().map(|&b| self.options(round, b)).collect();
        // One digit per (Byzantine node, correct recipient).
        let slots: Vec<(usize, usize)> =
            (0..self.byz.len()).flat_map(|b| (0..self.g).map(move |v| (b, v))).collect();
        let mut digits = vec![0usize; slots.len()];
        let before: Vec<BTreeSet<(NodeId, Value)>> = nodes.iter().map(|n| accepted_set(&n.st)).collect();
        let union: BTreeSet<(NodeId, Value)> = before.iter().flatten().copied().collect();
        let (mut leaves, mut bad) = (0u128, 0u128);
        loop {
            let mut inboxes: Vec<RoundInbox> = vec![RoundInbox::new(); self.g];
            for (v, inbox) in inboxes.iter_mut().enumerate() {
                for u in nodes {
                    for p in &u.out {
                        inbox.insert(u.st.self_id(), p.clone());
                    }
                }
                for (i, &(b, w)) in slots.iter().enumerate() {
                    if w == v {
                        for p in &options[b][digits[i]] {
                            inbox.insert(self.byz[b], p.clone());
                        }
                    }
                }
            }
            let mut next = Vec::with_capacity(self.g);
            for (u, inbox) in nodes.iter().zip(&inboxes) {
                let mut st = u.st.clone();
                let step = st.step(round + 1, inbox)?;
                next.push(Node { st, out: step.out.into_iter().map(|o| o.payload).collect() });
            }
            let violated = self.check(round + 1, &union, &before, &next, &digits, &slots);
            let (l, b) = self.visit(round + 1, &next)?;
            leaves += l;
            bad += if violated { l } else { b };

            // Advance the mixed-radix counter.
            let mut i = 0;
            loop {
                if i == digits.len() {
                    self.memo.insert(k, (leaves, bad));
                    return Ok((leaves, bad));
                }
                digits[i] += 1;
                if digits[i] < options[slots[i].0].len() {
                    break;
                }
                digits[i] = 0;
                i += 1;
            }
        }
    }

    fn check(
        &mut self,
        round: u64,
        union: &BTreeSet<(NodeId, Value)>,
        before: &[BTreeSet<(NodeId, Value)>],
        next: &[Node],
        digits: &[usize],
        slots: &[(usize, usize)],
    ) -> bool {
        let sender_correct = !self.p.byzantine_sender;
        let schedule = || {
            let d: Vec<String> = slots
                .iter()
                .zip(digits)
                .map(|((b, v), d)| format!("{}->{}:{d}", b + self.g + 1, v + 1))
                .collect();
            format!("choice in round {} [{}]", round - 1, d.join(" "))
        };
        let mut violated = false;
        for (u, old) in next.iter().zip(before) {
            let id = u.st.self_id();
            if sender_correct && round == 3 {
                let r = u.st.accepted_round(self.sender, BODIES[0]);
                let ok = r == Some(3);
                violated |= !ok;
                self.correctness.observe(round, ok, || {
                    format!("node {id} accepted in round {r:?}, not 3; {}", schedule())
                });
            }
            for (s, m, r) in u.st.accepted() {
                if r != round || old.contains(&(s, m)) {
                    continue;
                }
                let forged = sender_correct && s == self.sender && m != BODIES[0];
                violated |= forged;
                self.unforgeability.observe(round, !forged, || {
                    format!("node {id} accepted ({m},{s}) which {s} never sent; {}", schedule())
                });
            }
            for &(s, m) in union {
                let ok = u.st.accepted_round(s, m).is_some();
                violated |= !ok;
                self.relay.observe(round, ok, || {
                    format!("({m},{s}) accepted before round {round} but not by node {id}; {}", schedule())
                });
            }
        }
        violated
    }
}
