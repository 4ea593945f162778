use thiserror::Error;

use crate::chain::TimeMode;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("operation requires a {expected:?} chain, got {found:?}")]
    WrongMode { expected: TimeMode, found: TimeMode },

    #[error("chains have different time modes")]
    MixedModes,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time {0} is negative")]
    NegativeTime(f64),

    #[error("time {0} is not an integer step index")]
    NonIntegerTime(f64),

    #[error("final time {t} precedes initial time {tau}")]
    TimeOrder { t: f64, tau: f64 },

    #[error("periodic tails with periods {0} and {1} are not commensurable")]
    IncommensurablePeriods(f64, f64),

    #[error("chain is not time-invariant")]
    NotTimeInvariant,

    #[error("chain has no periodic tail")]
    NotPeriodic,

    #[error("marginal spectrum: eigenvalue modulus {modulus} lies within the ambiguity band below 1")]
    MarginalSpectrum { modulus: f64 },

    #[error("horizon schedule needs at least {needed} horizons, got {got}")]
    ScheduleTooShort { needed: usize, got: usize },

    #[error("null-space estimate did not converge: {0}")]
    NotConverged(String),

    #[error("steering system is ill-conditioned (condition number {0:e})")]
    IllConditioned(f64),

    #[error("fixed opinions must cover exactly the non-coalition agents: {0}")]
    FixedOpinionMismatch(String),

    #[error("jets overlap at t = {t} (agent {agent})")]
    OverlappingJets { t: usize, agent: usize },

    #[error("jet horizons do not match: {0} vs {1}")]
    HorizonMismatch(usize, usize),

    #[error("malformed chain document: {0}")]
    Parse(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
