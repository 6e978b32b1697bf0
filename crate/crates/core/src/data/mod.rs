//! Manifests, feature files, the synthetic benchmark and the neighbour index.

mod knn;
mod manifest;
mod repository;
mod synthetic;

pub use knn::{build_knn_index, central_step_feature, KnnIndex};
pub use manifest::{load_manifest, split_counts, validate_against_repository, write_manifest};
pub use repository::FeatureRepository;
pub use synthetic::{generate_synthetic_dataset, PrototypeClass, Prototypes, SyntheticDataset, SyntheticSpec};
