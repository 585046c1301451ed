//! Orchestration of training, evaluation and reporting.

pub mod config;
pub mod data;
pub mod efficiency;
pub mod evaluate;
pub mod model;
pub mod pipeline;
pub mod train;

pub use config::{AblationFlags, Preset, RunConfig};
pub use data::{Dataset, LabeledSplit, SealedSplit};
pub use evaluate::{compare_models, evaluate, export_embeddings, freeze_threshold, ThresholdPolicy};
pub use model::{Model, Stage};
pub use pipeline::{run_pipeline, PipelineOutput, PipelineReport};
pub use train::{pretrain, train_linear, train_proto, LinearInit};
