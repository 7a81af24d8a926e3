//! Error type shared by every module in the crate.

use thiserror::Error;

/// Anything that can go wrong while loading data, solving, or estimating.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed document {path}: {message}")]
    Parse { path: String, message: String },

    /// Network data violates a structural invariant; names the offender.
    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("unknown bus id {0:?}")]
    UnknownBus(String),

    #[error("unknown line id {0:?}")]
    UnknownLine(String),

    #[error("unknown directed end {from:?}->{to:?}")]
    UnknownEnd { from: String, to: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("power flow did not converge after {iterations} iterations (last voltage change {last_change:.3e})")]
    NonConvergence { iterations: u32, last_change: f64 },

    #[error("voltage collapse at bus {bus:?} (squared magnitude {v_sq:.3e})")]
    VoltageCollapse { bus: String, v_sq: f64 },

    #[error("measurement set is unobservable: rank {rank} of {required} required states{}", .resamples.map(|r| format!(" after {r} resamples")).unwrap_or_default())]
    Unobservable {
        rank: usize,
        required: usize,
        resamples: Option<u32>,
    },

    #[error("design matrix is rank deficient: rank {rank} of {required}")]
    RankDeficient { rank: usize, required: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("run {index} failed: {source}")]
    Run {
        index: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("{failed} of {total} runs failed observability, first: {first}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first: Box<Error>,
    },
}

impl Error {
    /// Wraps an error with the Monte Carlo run index it occurred in.
    pub fn in_run(self, index: u64) -> Self {
        Error::Run {
            index,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
