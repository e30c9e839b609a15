//! Desk-scale laboratory for general continual learning on boundary-free
//! class-incremental streams.

pub mod data;
pub mod error;
pub mod harness;
pub mod isa;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod stream;
pub mod tensor;

pub use data::Example;
pub use error::Error;
pub use harness::{ExperimentConfig, ReplayBuffer, RunResult, SyntheticDatasetSpec};
pub use isa::{IsaArtifacts, IsaConfig, IsaMode, PretrainConfig};
pub use masking::{MaskApplication, MaskPolicy, MaskVector, SessionMaskState};
pub use metrics::{AnytimeLog, EvalMatrix};
pub use model::{
    Backbone, BackboneConfig, OutputHead, PromptAugmentMlp, PromptProvenance, PromptSet,
};
pub use optim::{BaseOptimizer, BatchLoss, OptimKind, SharpnessConfig, SharpnessMode, StepReport};
pub use stream::{Dataset, SessionPlan, StreamBatch, StreamConfig};
pub use tensor::{GradVector, ParameterStore, Tape, Tensor};

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
