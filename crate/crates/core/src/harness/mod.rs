//! Desk-scale experiments: synthetic data, toy training, invariance and
//! diversity statistics, cost estimates and reports.

pub mod data;
pub mod eval;
pub mod experiment;
pub mod flops;
pub mod gradcheck;
pub mod report;
pub mod train;

pub use data::{apply_transform, generate_dataset, DataConfig, Dataset, Pose, SyntheticInstance, ToyWorld};
pub use eval::{
    invariance_eval, invariance_eval_many, mask_diversity, DiversityReport, Extractor, InvarianceReport, TransformFamily,
};
pub use experiment::{run_experiment, toy_sra_config, ExperimentConfig, ExperimentOutcome, InvarianceConfig};
pub use flops::{flops_estimate, FlopsBreakdown};
pub use report::{Check, Report, ReportFormat};
pub use train::{train_toy, ExtractorKind, TrainConfig, TrainResult, TrainState};
