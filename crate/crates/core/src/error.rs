use thiserror::Error;

use crate::field::Repr;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("representation mismatch: expected {expected:?}, found {found:?}")]
    Representation { expected: Repr, found: Repr },

    #[error("operator assembly failed: {0}")]
    Assembly(String),

    #[error("{stage}: no convergence after {iterations} iterations (last residual {residual:.3e})")]
    NoConvergence {
        stage: String,
        iterations: usize,
        residual: f64,
    },

    #[error("{stage}: residual grew for 5 consecutive iterations, aborting at iteration {iteration} (residual {residual:.3e})")]
    Divergence {
        stage: String,
        iteration: usize,
        residual: f64,
    },

    #[error("stability check failed: {0}")]
    Stability(String),

    #[error("time step {dt} exceeds the limit {limit}")]
    Cfl { dt: f64, limit: f64 },

    #[error("non-finite value encountered at t = {t}")]
    NonFinite { t: f64 },

    #[error("norm grew to {ratio:.2}x its initial value at t = {t}")]
    Instability { t: f64, ratio: f64 },

    #[error("decay fit window holds {points} points, need at least {needed}")]
    FitWindow { points: usize, needed: usize },

    #[error("tail outside truncation: M = {m} is not below v_max = {v_max}")]
    TailOutsideTruncation { m: f64, v_max: f64 },

    #[error("kernel cache: {0}")]
    Cache(String),

    #[error("field dump: {0}")]
    Dump(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
