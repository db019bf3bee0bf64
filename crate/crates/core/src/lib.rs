//! Paired two-modality lesion segmentation: multi-scale distribution
//! alignment, shared/specific feature disentanglement with a contrastive
//! term, shared/specific fusion, and a progressively weighted objective.

pub mod alignment;
pub mod config;
pub mod data;
pub mod disentangle;
pub mod encoder;
pub mod experiments;
pub mod error;
pub mod fusion;
pub mod losscheck;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod params;
pub mod plot;
pub mod trainer;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use model::{AdfNet, Modalities};
pub use trainer::Trainer;
