//! Historical inflows to a hydrologic Markov chain: cleaning, weekly-median
//! log normalization, clustering into states, transition estimation and
//! resampling of inflows conditioned on (week, state).

use std::path::Path;

use thiserror::Error;

pub mod cluster;
pub mod data;
pub mod markov;
pub mod sampler;

pub use cluster::{kmeans_cluster, pca_cluster, pca_direction, Clustering, KMeansResult, PcaResult};
pub use data::{
    clean_negatives, load_inflow_csv, normalize, weekly_medians, InflowDataset, NormalizedSeries,
    WEEKS_PER_YEAR,
};
pub use markov::{
    estimate_model, estimate_transition_matrix, estimate_transition_matrix_with_prior,
    label_residual_rows, next_state, ClusterMethod, EstimationDiagnostics, HydroMarkovModel,
};
pub use sampler::{ConstantSampler, DiscreteSampler, EmpiricalSampler, InflowSampler};

#[derive(Debug, Error)]
pub enum HydroError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Data(String),
    #[error("week {week}, site {site} has no valid data")]
    NoData { week: usize, site: usize },
    #[error("week {week}, site {site} has a zero median")]
    ZeroMedian { week: usize, site: usize },
    #[error("clustering: {0}")]
    Cluster(String),
    #[error("state {state} is never left; merge it or supply a prior")]
    NoDepartures { state: usize },
    #[error("transition matrix: {0}")]
    Transition(String),
    #[error("no historical inflows for week {week}, state {state}")]
    EmptyPool { week: usize, state: usize },
}

impl HydroError {
    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        HydroError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}
