use thiserror::Error;

use crate::flow::BurstReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid mass profile: {0}")]
    InvalidMass(String),

    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("index {index} out of range 1..={max}")]
    Index { index: usize, max: usize },

    /// Two collisions closer in time than the tie tolerance.
    #[error("singular orbit: collisions {first} and {second} coincide at t = {t} (separation {separation:e})")]
    Singularity {
        t: f64,
        first: usize,
        second: usize,
        separation: f64,
    },

    /// `k` particles rest on the floor with zero energy.
    #[error("degenerate state: {k} particle(s) stuck on the floor")]
    Degenerate { k: usize },

    #[error("accumulation guard: {} events within a window of {} at t = {}", .0.events_in_window, .0.window, .0.t)]
    AccumulationGuard(Box<BurstReport>),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("internal consistency failure: {0}")]
    InternalConsistency(String),

    #[error("finite-difference oracle unreliable: {0}")]
    OracleUnreliable(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
