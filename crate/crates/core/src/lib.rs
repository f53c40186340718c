//! Byzantine agreement protocols for networks where nodes know only their own
//! identifier, plus a round-based simulator with adversaries and checkers.

pub mod approx;
pub mod consensus;
pub mod dynamic;
pub mod model;
pub mod parallel;
pub mod rb;
pub mod rotor;
pub mod sim;

pub use model::*;
