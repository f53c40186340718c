//! Deterministic simulator: scenarios, the round engine, Byzantine
//! strategies and per-protocol property checks.

pub mod adversary;
pub mod engine;
pub mod explore;
pub mod partition;
pub mod scenario;
pub mod verdict;

mod approx;
mod consensus;
mod dynamic;
mod parallel;
mod rb;
mod rotor;

use thiserror::Error;

use crate::model::NodeId;
use adversary::CatalogAdversary;
use engine::{DelayFn, Engine, EngineError, Process, TraceRecord};
use scenario::{Protocol, Scenario, ScenarioError};
use verdict::RunOutcome;

pub use adversary::AdversarySpec;
pub use scenario::NodeSpec;
pub use verdict::{RunReport, Verdict};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("run aborted: {0}")]
    Engine(#[from] EngineError),
}

/// Runs a scenario and evaluates every property of its protocol.
pub fn run_scenario(s: &Scenario) -> Result<RunOutcome, SimError> {
    run(s, false).map(|(o, _)| o)
}

/// Like [`run_scenario`], also returning every delivery.
pub fn run_scenario_traced(s: &Scenario) -> Result<(RunOutcome, Vec<TraceRecord>), SimError> {
    run(s, true).map(|(o, t)| (o, t.unwrap_or_default()))
}

fn run(s: &Scenario, trace: bool) -> Result<(RunOutcome, Option<Vec<TraceRecord>>), SimError> {
    s.validate()?;
    let out = match s.protocol {
        Protocol::Rb => rb::run(s, trace)?,
        Protocol::Rotor => rotor::run(s, trace)?,
        Protocol::Consensus => consensus::run(s, trace)?,
        Protocol::Approx => approx::run(s, trace)?,
        Protocol::Parallel => parallel::run(s, trace)?,
        Protocol::Dynamic => dynamic::run(s, trace)?,
        Protocol::PartitionDemo => partition::run(s, trace)?,
    };
    debug_assert_eq!(
        out.0.verdict.properties.iter().map(|p| p.name.as_str()).collect::<Vec<_>>(),
        verdict::property_names(s.protocol)
    );
    Ok(out)
}

/// Horizon rounds for protocols that scale with the fault count.
pub(crate) fn consensus_horizon(f: usize) -> u64 {
    2 + 5 * (2 * f as u64 + 5)
}

/// Steps the engine until `horizon`, or until every correct node has halted.
/// `observe` runs after every round.
pub(crate) fn drive<P: Process>(
    s: &Scenario,
    nodes: Vec<(P, u64, bool)>,
    horizon: u64,
    trace: bool,
    delay: Option<DelayFn>,
    mut observe: impl FnMut(&mut Engine<P>),
) -> Result<(Engine<P>, Option<Vec<TraceRecord>>), SimError> {
    let mut adversary = CatalogAdversary::new(&s.adversary, s.seed)?;
    let mut engine = Engine::new(nodes)?;
    if let Some(d) = delay {
        engine = engine.with_delay(d);
    }
    if trace {
        engine = engine.record_trace();
    }
    while engine.round() < horizon {
        engine.step(&mut adversary)?;
        observe(&mut engine);
        if engine.slots().iter().filter(|sl| !sl.byzantine).all(|sl| sl.halted_at.is_some()) {
            break;
        }
    }
    let t = engine.take_trace();
    Ok((engine, t))
}

pub(crate) fn ids(list: impl IntoIterator<Item = NodeId>) -> String {
    list.into_iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
}
