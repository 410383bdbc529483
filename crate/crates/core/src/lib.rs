//! Cross-camera soft-label learning for person re-identification with
//! intra-camera supervision only.
//!
//! The pipeline: a per-camera triplet loss trains an embedding, a person
//! buffer tracks one running-mean feature per (camera, local person), and a
//! k-NN affinity matrix over those features provides soft cross-camera
//! labels for an inter-camera objective.

pub mod ablation;
pub mod affinity;
pub mod benchmark;
pub mod buffer;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod trainer;

pub use ablation::{run_ablation, AblationAxis, AblationRunner, AblationTable};
pub use affinity::{build_affinity, soft_label_rows, AffinityBuild, AffinityMatrix, SoftLabelRow};
pub use buffer::PersonBuffer;
pub use checkpoint::Checkpoint;
pub use dataset::{generate_synthetic, Dataset, PersonIndex, Sample, Split, SynthSpec, SyntheticSplits};
pub use error::{Error, Result};
pub use eval::{evaluate, RetrievalResult, CMC_RANKS};
pub use losses::{Mining, PositiveSampling, Weighting};
pub use model::{ClassifierHead, EmbeddingModel, OptimizerConfig, Sgd};
pub use trainer::{train, InterMode, TrainConfig, TrainLog, TrainObserver, TrainOutcome};
