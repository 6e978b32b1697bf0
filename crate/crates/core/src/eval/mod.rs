//! Metrics, evaluation protocols and the finite conditional-invariance check.

mod metrics;
mod proposition;
mod protocols;

pub use metrics::{
    average_precision, expand_to_frames, min_max_normalize, multiclass_metrics, roc_auc,
    MulticlassMetrics,
};
pub use proposition::{check_proposition1, compare_conditionals, Joint, PropositionReport};
pub use protocols::{
    evaluate_dataset, evaluate_protocol1, evaluate_protocol2, frame_level_inputs, load_split,
    load_subsets, relabel_for_subset, subset_definition, write_score_dump, DatasetReport, EvalSet,
    Metric, Protocol1Report, Protocol2Report, Scorer, SubsetDefinition, SubsetReport, VideoScore,
};
