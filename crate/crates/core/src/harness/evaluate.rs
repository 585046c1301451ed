//! Threshold selection on validation, sealed final evaluation, and
//! embedding export.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::{LabeledSplit, SealedSplit};
use super::model::Model;
use crate::error::{invalid, io_err, Result};
use crate::stats::{self, ComparisonReport, EvalReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "value")]
pub enum ThresholdPolicy {
    /// Max-F1 threshold on the validation split, then frozen.
    ValidationMaxF1,
    Fixed(f64),
}

/// Resolves and stores the decision threshold on the model.
pub fn freeze_threshold(model: &mut Model, val: &LabeledSplit, policy: ThresholdPolicy) -> Result<f64> {
    let t = match policy {
        ThresholdPolicy::Fixed(t) => t,
        ThresholdPolicy::ValidationMaxF1 => {
            val.require_both_classes("threshold selection")?;
            let s = model.scores(&val.samples())?;
            stats::max_f1_threshold(&s, &val.labels())?
        }
    };
    model.threshold = Some(t);
    Ok(t)
}

fn threshold_of(model: &Model) -> Result<f64> {
    model
        .threshold
        .map_or_else(|| invalid("evaluate", "model has no frozen threshold"), Ok)
}

/// Scores the held-out split and reports at the model's frozen threshold.
pub fn evaluate(model: &Model, test: &SealedSplit) -> Result<(EvalReport, Vec<f64>)> {
    let t = threshold_of(model)?;
    let scores = model.scores(&test.samples())?;
    Ok((test.evaluate(&scores, t)?, scores))
}

/// Paired comparison of two models on the same held-out windows.
pub fn compare_models(a: &Model, b: &Model, test: &SealedSplit, n_resamples: usize, seed: u64) -> Result<ComparisonReport> {
    let (ta, tb) = (threshold_of(a)?, threshold_of(b)?);
    let sa = a.scores(&test.samples())?;
    let sb = b.scores(&test.samples())?;
    test.compare(&sa, &sb, ta, tb, n_resamples, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    pub ids: Vec<String>,
    pub labels: Vec<u8>,
    pub rows: usize,
    pub dims: usize,
    pub dtype: String,
    pub byte_order: String,
}

/// Writes `path` (row-major little-endian f32) and `path` + `.json`.
pub fn export_embeddings(model: &Model, split: &LabeledSplit, path: &Path) -> Result<EmbeddingSidecar> {
    let rows = model.export_rows(&split.samples())?;
    let dims = rows.first().map_or(0, |r| r.len());
    let mut bytes = Vec::with_capacity(rows.len() * dims * 4);
    for r in &rows {
        for &v in r {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, &bytes).map_err(io_err(path))?;
    let side = EmbeddingSidecar {
        ids: split.windows.iter().map(|w| w.window_id.clone()).collect(),
        labels: split.labels(),
        rows: rows.len(),
        dims,
        dtype: "float32".into(),
        byte_order: "little".into(),
    };
    let sp = sidecar_path(path);
    fs::write(&sp, serde_json::to_vec_pretty(&side)?).map_err(io_err(&sp))?;
    Ok(side)
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}
