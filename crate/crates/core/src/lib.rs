//! Language-guided open-world video anomaly detection over precomputed
//! feature sequences.
//!
//! A model maps a feature sequence and a user-supplied anomaly definition (a
//! set of class prompts plus a normal class) to per-step anomaly logits and
//! per-class similarities. Training is weakly supervised; evaluation covers
//! cross-dataset and changing-definition protocols.

pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod rng;
pub mod synthesis;
pub mod tensor;
pub mod train;
pub mod types;

pub use config::Config;
pub use error::{Error, Result};
pub use tensor::Mat;
pub use types::{AnomalyDefinition, ClassEntry, FeatureSequence, ScoreResult, Split, VideoRecord};
