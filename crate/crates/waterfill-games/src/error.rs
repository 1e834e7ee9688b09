use std::path::PathBuf;

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A `GameInstance` or `ChannelModelParams` violated a structural invariant.
    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    /// Solver or harness options failed validation.
    #[error("invalid options: {0}")]
    InvalidOptions(String),

    /// A solver was handed a non-positive budget.
    #[error("budget must be positive, got {0}")]
    NonPositiveBudget(f64),

    /// Effective noise must be strictly positive in every bin.
    #[error("effective noise must be positive, got {value} in bin {bin}")]
    NonPositiveNoise { bin: usize, value: f64 },

    /// A fixed allocation handed to the follower subgame is infeasible.
    #[error("fixed allocation for user {user} is infeasible: {reason}")]
    InfeasibleAllocation { user: usize, reason: String },

    /// The lower-level (follower) equilibrium failed to converge where a
    /// converged one is required.
    #[error("follower equilibrium did not converge after {iterations} sweeps (residual {residual:.3e})")]
    LowerLevelDiverged { iterations: usize, residual: f64 },

    /// The restricted `(I + G)` response matrix is singular for this bin.
    #[error("singular follower response matrix in bin {bin}")]
    SingularBinMatrix { bin: usize },

    /// A power left the belief domain `{P >= 0, beta - gamma*P >= 0}`.
    #[error("power {power} in bin {bin} violates the belief domain (beta={beta}, gamma={gamma})")]
    BeliefDomain {
        bin: usize,
        power: f64,
        beta: f64,
        gamma: f64,
    },

    /// Exhaustive Stackelberg search rejected an instance beyond desk scale.
    #[error("instance exceeds the exhaustive-search guard (K={users} > 3 or N={bins} > 4)")]
    DeskScaleExceeded { users: usize, bins: usize },

    /// I/O failure, with the offending path attached.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed instance or config file.
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
