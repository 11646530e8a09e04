//! Error type shared across the crate.

/// Everything that can go wrong, from malformed input panels to numerical
/// failure deep inside an iterative solve.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("panel contains no observations")]
    EmptyPanel,

    #[error("duplicate observation for worker {0} in period {1}")]
    DuplicateObservation(String, i64),

    #[error("worker {0} appears in more than two distinct firms; only single-transition histories are supported")]
    TooManyFirms(String),

    #[error("worker {0} has a single observation but the design requires T >= 2")]
    SingletonWorker(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("design and estimand are incompatible: {0}")]
    LabelMismatch(String),

    #[error("normal equations are rank deficient")]
    RankDeficient,

    #[error("iterative solver did not converge after {iters} iterations (relative residual {residual:.3e})")]
    NotConverged { iters: usize, residual: f64 },

    #[error("observation {index} has leverage {value} >= 1; the estimator is undefined on this design")]
    LeverageOne { index: usize, value: f64 },

    #[error("cluster {0} has leverage one; leave-cluster-out is undefined")]
    ClusterLeverageOne(String),

    #[error("degenerate degrees of freedom: n = {n}, k = {k}")]
    DegenerateDof { n: usize, k: usize },

    #[error("mobility network is not connected after pruning")]
    Disconnected,

    #[error("no path between firms {0} and {1} in the requested subnetwork")]
    NoPath(String, String),

    #[error("no split-sample plan exists for observation {0}")]
    NoPlan(usize),

    #[error("eigenvalue computation produced fewer than {needed} usable pairs ({got} converged)")]
    InsufficientEigen { needed: usize, got: usize },

    #[error("conditional variance is numerically singular (1 - rho^2 = {0:.3e})")]
    SingularConditional(f64),

    #[error("interval optimization failed: {0}")]
    OptFailed(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code contract: 2 for input validation problems, 3 for numerical
    /// failures, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::EmptyPanel
            | Error::DuplicateObservation(..)
            | Error::TooManyFirms(..)
            | Error::SingletonWorker(..)
            | Error::Validation(..)
            | Error::LabelMismatch(..) => 2,
            Error::RankDeficient
            | Error::NotConverged { .. }
            | Error::LeverageOne { .. }
            | Error::ClusterLeverageOne(..)
            | Error::DegenerateDof { .. }
            | Error::Disconnected
            | Error::NoPath(..)
            | Error::NoPlan(..)
            | Error::InsufficientEigen { .. }
            | Error::SingularConditional(..)
            | Error::OptFailed(..)
            | Error::Numerical(..) => 3,
            Error::Io(..) => 1,
        }
    }
}
