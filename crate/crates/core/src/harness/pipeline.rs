//! End-to-end run: windows and split, pretraining, prototype head and
//! linear baseline from the same pretrained extractor, held-out evaluation
//! and paired comparison.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::{label_subset, prepare, Dataset};
use super::evaluate::{compare_models, evaluate, freeze_threshold, ThresholdPolicy};
use super::model::{derive_seed, Model};
use super::train::{pretrain, train_linear, train_proto, LinearHistory, LinearInit, Log, PretrainHistory, PretrainOutcome, ProtoHistory};
use crate::corpus::{Manifest, Recording};
use crate::error::Result;
use crate::stats::{ComparisonReport, EvalReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub windows_per_split: [usize; 3],
    pub pretrain: PretrainHistory,
    pub proto: ProtoHistory,
    pub linear: LinearHistory,
    pub proto_eval: EvalReport,
    pub linear_eval: EvalReport,
    /// Prototype model (a) against the linear baseline (b).
    pub comparison: ComparisonReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub prepare_s: f64,
    pub pretrain_s: f64,
    pub proto_s: f64,
    pub linear_s: f64,
    pub evaluate_s: f64,
}

pub struct PipelineOutput {
    pub report: PipelineReport,
    pub timings: Timings,
    pub pretrained: PretrainOutcome,
    pub proto_model: Model,
    pub linear_model: Model,
    pub data: Dataset,
}

pub fn build_dataset(cfg: &RunConfig, manifest: &Manifest, recordings: &[Recording]) -> Result<Dataset> {
    let p = prepare(manifest, recordings, cfg.data.split, &cfg.data.windows, cfg.seed)?;
    Dataset::from_windows(p.windows, p.split)
}

pub fn run_pipeline(cfg: &RunConfig, manifest: &Manifest, recordings: &[Recording], mut log: Log<'_>) -> Result<PipelineOutput> {
    let mut timings = Timings::default();
    let t = Instant::now();
    let data = build_dataset(cfg, manifest, recordings)?;
    timings.prepare_s = t.elapsed().as_secs_f64();
    let mut say = |s: &str| {
        if let Some(f) = log.as_mut() {
            f(s);
        }
    };
    say(&format!("windows: train {}, val {}, test {}", data.train.len(), data.val.len(), data.test.len()));

    let t = Instant::now();
    let mut pl = |s: &str| say(s);
    let pretrained = pretrain(cfg, &data.train.samples(), Some(&mut pl))?;
    timings.pretrain_s = t.elapsed().as_secs_f64();

    let labeled = if cfg.label_fraction < 1.0 {
        label_subset(&data.train, cfg.label_fraction, derive_seed(cfg.seed, &[40]))?
    } else {
        data.train.clone()
    };

    let t = Instant::now();
    let (mut proto_model, proto_hist) = train_proto(pretrained.model.clone(), &labeled, &data.val, Some(&mut pl))?;
    freeze_threshold(&mut proto_model, &data.val, ThresholdPolicy::ValidationMaxF1)?;
    timings.proto_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let (mut linear_model, linear_hist) =
        train_linear(pretrained.model.clone(), &labeled, &data.val, LinearInit::Pretrained, Some(&mut pl))?;
    freeze_threshold(&mut linear_model, &data.val, ThresholdPolicy::ValidationMaxF1)?;
    timings.linear_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let (proto_eval, _) = evaluate(&proto_model, &data.test)?;
    let (linear_eval, _) = evaluate(&linear_model, &data.test)?;
    let comparison = compare_models(
        &proto_model,
        &linear_model,
        &data.test,
        cfg.eval.bootstrap_resamples,
        derive_seed(cfg.seed, &[50]),
    )?;
    timings.evaluate_s = t.elapsed().as_secs_f64();
    let report = PipelineReport {
        windows_per_split: [data.train.len(), data.val.len(), data.test.len()],
        pretrain: pretrained.history.clone(),
        proto: proto_hist,
        linear: linear_hist,
        proto_eval,
        linear_eval,
        comparison,
    };
    Ok(PipelineOutput {
        report,
        timings,
        pretrained,
        proto_model,
        linear_model,
        data,
    })
}
