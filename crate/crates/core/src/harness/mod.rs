//! Experiment harness: configuration, synthetic data, replay memory,
//! run execution, sweeps, and result aggregation.

pub mod buffer;
pub mod config;
pub mod results;
pub mod run;
pub mod sweep;
pub mod synth;

pub use buffer::ReplayBuffer;
pub use config::{ExperimentConfig, ModelSpec, SyntheticDatasetSpec};
pub use results::{
    anytime_csv, append_results, read_results, retention_csv, summarize, summary_table,
    SeriesSummary,
};
pub use run::{prepare_backbone, run_gcl, warm_up, Prepared, RunResult};
pub use sweep::{expand_arms, sweep, SweepAxis, BUFFER_ARMS};
pub use synth::{generate_synthetic, place_centroids};
