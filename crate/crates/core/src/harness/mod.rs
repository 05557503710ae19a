//! Desk-scale experiments: synthetic datasets with conflicting taxonomies,
//! training, evaluation and mode comparison.

pub mod compare;
pub mod config;
pub mod data;
pub mod eval;
pub mod train;

pub use compare::{compare_modes, Comparison};
pub use config::{BenchConfig, MatchingMode};
pub use data::{generate_datasets, synthesize_features, BenchData, Scene, World};
pub use eval::{evaluate, evaluate_detection, evaluate_multilabel, CategorySource};
pub use train::{run_train, RunReport, TrainRun};
