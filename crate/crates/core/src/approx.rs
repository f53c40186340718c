//! One-round trimmed-midpoint approximate agreement, iterable.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{Kind, NodeId, Outgoing, Payload, ProtocolError, Rational, RoundInbox};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ApproxError {
    #[error("no values to trim")]
    Empty,
}

/// Sorted copy with `⌊n/3⌋` values removed from each end.
pub fn aa_trim(values: &[Rational]) -> Result<Vec<Rational>, ApproxError> {
    if values.is_empty() {
        return Err(ApproxError::Empty);
    }
    let mut v = values.to_vec();
    v.sort();
    let k = v.len() / 3;
    Ok(v[k..v.len() - k].to_vec())
}

/// Midpoint of the extremes that survive trimming.
pub fn aa_output(values: &[Rational]) -> Result<Rational, ApproxError> {
    let s = aa_trim(values)?;
    Ok((s[0] + s[s.len() - 1]) / Rational::from_integer(2))
}

/// Runs `rounds` iterations. `deliver` returns, for each node, the values it
/// received from others in that iteration (its own value is added here).
/// Returns the trajectory, starting with the inputs.
pub fn aa_iterate(
    inputs: &BTreeMap<NodeId, Rational>,
    rounds: usize,
    mut deliver: impl FnMut(usize, &BTreeMap<NodeId, Rational>) -> BTreeMap<NodeId, Vec<Rational>>,
) -> Result<Vec<BTreeMap<NodeId, Rational>>, ApproxError> {
    let mut traj = vec![inputs.clone()];
    for it in 0..rounds {
        let cur = traj.last().expect("non-empty");
        let received = deliver(it, cur);
        let mut next = BTreeMap::new();
        for (&id, &own) in cur {
            let mut vals = received.get(&id).cloned().unwrap_or_default();
            vals.push(own);
            next.insert(id, aa_output(&vals)?);
        }
        traj.push(next);
    }
    Ok(traj)
}

/// What one node saw and decided in one iteration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AaRound {
    pub input: Rational,
    pub received: Vec<Rational>,
    pub trimmed: Vec<Rational>,
    pub output: Rational,
}

/// Round-driven node: round 1 broadcasts the input; every later round
/// consumes one iteration's estimates and broadcasts the next estimate.
#[derive(Clone, Debug)]
pub struct AaState {
    self_id: NodeId,
    current: Rational,
    round: u64,
    iterations: u64,
    history: Vec<AaRound>,
}

pub fn aa_init(self_id: NodeId, input: Rational, iterations: u64) -> (AaState, Vec<Outgoing>) {
    let st = AaState { self_id, current: input, round: 1, iterations, history: Vec::new() };
    let out = vec![Outgoing::broadcast(Payload::new(Kind::Estimate(input)))];
    (st, out)
}

impl AaState {
    pub fn self_id(&self) -> NodeId {
        self.self_id
    }

    pub fn history(&self) -> &[AaRound] {
        &self.history
    }

    pub fn current(&self) -> Rational {
        self.current
    }

    pub fn done(&self) -> bool {
        self.history.len() as u64 >= self.iterations
    }

    pub fn step(&mut self, round: u64, inbox: &RoundInbox) -> Result<Vec<Outgoing>, ProtocolError> {
        if round != self.round + 1 {
            return Err(ProtocolError::OutOfOrder { expected: self.round + 1, got: round });
        }
        self.round = round;
        if self.done() {
            return Ok(Vec::new());
        }
        // One value per sender: a node that sent several keeps only its smallest.
        let mut per_sender: BTreeMap<NodeId, Rational> = BTreeMap::new();
        for (from, p) in inbox.iter() {
            if let (Kind::Estimate(q), None, None) = (&p.kind, p.tag.session, p.tag.instance) {
                per_sender.entry(from).and_modify(|v| *v = (*v).min(*q)).or_insert(*q);
            }
        }
        per_sender.entry(self.self_id).or_insert(self.current);
        let received: Vec<Rational> = per_sender.values().copied().collect();
        let trimmed = aa_trim(&received).expect("own value always present");
        let output = (trimmed[0] + trimmed[trimmed.len() - 1]) / Rational::from_integer(2);
        self.history.push(AaRound { input: self.current, received, trimmed, output });
        self.current = output;
        if self.done() {
            Ok(Vec::new())
        } else {
            Ok(vec![Outgoing::broadcast(Payload::new(Kind::Estimate(output)))])
        }
    }
}
