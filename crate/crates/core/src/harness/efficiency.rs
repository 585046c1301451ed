//! Label-efficiency comparison: pretrained extractor + configured head
//! versus the same architecture trained from random init, on nested
//! stratified subsets of training patients.

use serde::{Deserialize, Serialize};

use super::data::{label_subset, Dataset};
use super::evaluate::{freeze_threshold, ThresholdPolicy};
use super::model::{derive_seed, Model};
use super::train::{train_linear, train_proto, LinearInit, Log};
use crate::error::Result;
use crate::stats::Interval95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub fraction: f64,
    pub n_train_patients: usize,
    pub n_train_windows: usize,
    pub ssl_f1: f64,
    pub supervised_f1: f64,
    pub ssl_ci: Interval95,
    pub supervised_ci: Interval95,
}

/// Trains the head configured by the ablation flags on top of `pretrained`.
pub fn finetune_pretrained(pretrained: &Model, train: &super::data::LabeledSplit, val: &super::data::LabeledSplit, log: Log<'_>) -> Result<Model> {
    let mut m = if pretrained.config.ablation.proto_head {
        train_proto(pretrained.clone(), train, val, log)?.0
    } else {
        train_linear(pretrained.clone(), train, val, LinearInit::Pretrained, log)?.0
    };
    freeze_threshold(&mut m, val, ThresholdPolicy::ValidationMaxF1)?;
    Ok(m)
}

pub fn efficiency_curve(pretrained: &Model, data: &Dataset, fractions: &[f64], mut log: Log<'_>) -> Result<Vec<EfficiencyRow>> {
    let cfg = &pretrained.config;
    let subset_seed = derive_seed(cfg.seed, &[40]);
    let n = cfg.eval.bootstrap_resamples;
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let train = label_subset(&data.train, fraction, subset_seed)?;
        let ssl = finetune_pretrained(pretrained, &train, &data.val, None)?;
        let mut scratch = train_linear(Model::new(cfg)?, &train, &data.val, LinearInit::Scratch, None)?.0;
        freeze_threshold(&mut scratch, &data.val, ThresholdPolicy::ValidationMaxF1)?;
        let test = data.test.samples();
        let (s_ssl, s_sup) = (ssl.scores(&test)?, scratch.scores(&test)?);
        let (t_ssl, t_sup) = (ssl.threshold.unwrap_or(0.5), scratch.threshold.unwrap_or(0.5));
        let r_ssl = data.test.evaluate(&s_ssl, t_ssl)?;
        let r_sup = data.test.evaluate(&s_sup, t_sup)?;
        let ci_seed = derive_seed(cfg.seed, &[41]);
        let row = EfficiencyRow {
            fraction,
            n_train_patients: train.patient_labels().len(),
            n_train_windows: train.len(),
            ssl_f1: r_ssl.f1,
            supervised_f1: r_sup.f1,
            ssl_ci: data.test.f1_interval(&s_ssl, t_ssl, n, ci_seed)?,
            supervised_ci: data.test.f1_interval(&s_sup, t_sup, n, ci_seed)?,
        };
        if let Some(f) = log.as_mut() {
            f(&format!(
                "efficiency {fraction}: ssl F1 {:.4} [{:.4}, {:.4}], supervised F1 {:.4} [{:.4}, {:.4}]",
                row.ssl_f1, row.ssl_ci.low, row.ssl_ci.high, row.supervised_f1, row.supervised_ci.low, row.supervised_ci.high
            ));
        }
        rows.push(row);
    }
    Ok(rows)
}
