//! Bottom-up architecture search: bundle enumeration and quick-train
//! scoring, then stochastic coordinate descent over the network structure.

mod bundles;
mod scd;
mod train;

pub use bundles::{
    enumerate_bundles, score_bundle, score_bundles, select_bundles, BundleCandidate, Sketch,
};
pub use scd::{
    scd_search, Coordinate, SearchConfig, SearchOutcome, SearchStatus, TraceRecord, STALL_ROUNDS,
};
pub use train::{evaluate, train, Dataset, Sample, TrainConfig, TrainReport};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Arch(#[from] crate::arch::ArchError),
    #[error(transparent)]
    Cost(#[from] crate::costmodel::CostError),
    #[error(transparent)]
    Detect(#[from] crate::detect::DetectError),
}

pub type Result<T> = std::result::Result<T, SearchError>;
