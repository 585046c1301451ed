//! Discrimination, calibration and paired significance statistics.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, Normal};

use crate::error::{invalid, Result};

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    (pos, labels.len() - pos)
}

fn require_both(op: &'static str, labels: &[u8]) -> Result<(usize, usize)> {
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return invalid(op, "labels contain a single class");
    }
    Ok((p, n))
}

/// 1-based midranks (ties share the average rank).
pub fn midranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = mid;
        }
        i = j + 1;
    }
    r
}

/// Mann–Whitney AUROC from midranks.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (p, n) = require_both("auroc", labels)?;
    let r = midranks(scores);
    let rank_sum: f64 = r.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(r, _)| r).sum();
    Ok((rank_sum - (p * (p + 1)) as f64 / 2.0) / (p * n) as f64)
}

/// Distinct thresholds in descending order with cumulative (tp, fp) at each.
fn sweep(scores: &[f64], labels: &[u8]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let last = k + 1 == order.len() || scores[order[k + 1]] != scores[i];
        if last {
            out.push((scores[i], tp, fp));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub x: f64,
    pub y: f64,
}

/// ROC points (x = FPR, y = TPR), starting at (0, 0).
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<CurvePoint>> {
    let (p, n) = require_both("roc_curve", labels)?;
    let mut pts = vec![CurvePoint {
        threshold: f64::INFINITY,
        x: 0.0,
        y: 0.0,
    }];
    pts.extend(sweep(scores, labels).into_iter().map(|(t, tp, fp)| CurvePoint {
        threshold: t,
        x: fp as f64 / n as f64,
        y: tp as f64 / p as f64,
    }));
    Ok(pts)
}

/// PR points (x = recall, y = precision) at each distinct threshold.
pub fn pr_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<CurvePoint>> {
    let (p, _) = require_both("pr_curve", labels)?;
    Ok(sweep(scores, labels)
        .into_iter()
        .map(|(t, tp, fp)| CurvePoint {
            threshold: t,
            x: tp as f64 / p as f64,
            y: tp as f64 / (tp + fp) as f64,
        })
        .collect())
}

/// Step-integrated area under the PR curve: Σ (R_k − R_{k−1})·P_k.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let mut prev = 0.0;
    let mut area = 0.0;
    for pt in pr_curve(scores, labels)? {
        area += (pt.x - prev) * pt.y;
        prev = pt.x;
    }
    Ok(area)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(pred: &[u8], labels: &[u8]) -> Self {
        let mut c = Self::default();
        for (&p, &y) in pred.iter().zip(labels) {
            match (p, y) {
                (1, 1) => c.tp += 1,
                (1, _) => c.fp += 1,
                (_, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        c
    }

    pub fn at_threshold(scores: &[f64], labels: &[u8], threshold: f64) -> Self {
        let pred: Vec<u8> = scores.iter().map(|&s| u8::from(s >= threshold)).collect();
        Self::from_predictions(&pred, labels)
    }

    fn ratio(a: usize, b: usize) -> f64 {
        if b == 0 {
            0.0
        } else {
            a as f64 / b as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        Self::ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_)
    }

    pub fn precision(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        Self::ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

pub fn f1_at(scores: &[f64], labels: &[u8], threshold: f64) -> f64 {
    Confusion::at_threshold(scores, labels, threshold).f1()
}

/// Threshold maximizing F1 of `score ≥ t`. The highest maximizing score is
/// chosen and the threshold placed midway to the next lower score, so small
/// shifts on unseen data do not flip boundary cases.
pub fn max_f1_threshold(scores: &[f64], labels: &[u8]) -> Result<f64> {
    require_both("max_f1_threshold", labels)?;
    let (p, _) = class_counts(labels);
    let sw = sweep(scores, labels);
    let mut best = (f64::NEG_INFINITY, 0);
    for (k, &(_, tp, fp)) in sw.iter().enumerate() {
        let f1 = 2.0 * tp as f64 / (tp + fp + p) as f64;
        if f1 > best.0 {
            best = (f1, k);
        }
    }
    let k = best.1;
    Ok(match sw.get(k + 1) {
        Some(next) => 0.5 * (sw[k].0 + next.0),
        None => sw[k].0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub frequency: f64,
}

pub const ECE_BINS: usize = 15;

/// Equal-width reliability bins over the positive-class probability; the
/// last bin is closed at 1. Returns (ECE, bins).
pub fn calibration(probs: &[f64], labels: &[u8], n_bins: usize) -> (f64, Vec<ReliabilityBin>) {
    let mut sum_p = vec![0.0; n_bins];
    let mut sum_y = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for (&p, &y) in probs.iter().zip(labels) {
        let b = ((p * n_bins as f64).floor() as usize).min(n_bins - 1);
        sum_p[b] += p;
        sum_y[b] += y as f64;
        count[b] += 1;
    }
    let n = probs.len().max(1) as f64;
    let mut ece = 0.0;
    let bins = (0..n_bins)
        .map(|b| {
            let c = count[b];
            let (mc, fr) = if c > 0 {
                (sum_p[b] / c as f64, sum_y[b] / c as f64)
            } else {
                (0.0, 0.0)
            };
            ece += (sum_p[b] - sum_y[b]).abs() / n;
            ReliabilityBin {
                lo: b as f64 / n_bins as f64,
                hi: (b + 1) as f64 / n_bins as f64,
                count: c,
                mean_confidence: mc,
                frequency: fr,
            }
        })
        .collect();
    (ece, bins)
}

pub fn brier(probs: &[f64], labels: &[u8]) -> f64 {
    probs.iter().zip(labels).map(|(p, &y)| (p - y as f64).powi(2)).sum::<f64>() / probs.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub ece: f64,
    pub brier: f64,
    pub bins: Vec<ReliabilityBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auroc: f64,
    pub auprc: f64,
    pub roc: Vec<CurvePoint>,
    pub pr: Vec<CurvePoint>,
    pub calibration: Calibration,
    pub threshold: f64,
    pub n_patients: usize,
    pub n_windows: usize,
}

/// Window-level report at a fixed decision threshold.
pub fn evaluate_scores(scores: &[f64], labels: &[u8], patients: &[String], threshold: f64) -> Result<EvalReport> {
    require_both("evaluate", labels)?;
    if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return invalid("evaluate", "scores must be probabilities in [0, 1]");
    }
    let c = Confusion::at_threshold(scores, labels, threshold);
    let (ece, bins) = calibration(scores, labels, ECE_BINS);
    let mut uniq: Vec<&String> = patients.iter().collect();
    uniq.sort();
    uniq.dedup();
    Ok(EvalReport {
        accuracy: c.accuracy(),
        precision: c.precision(),
        recall: c.recall(),
        f1: c.f1(),
        auroc: auroc(scores, labels)?,
        auprc: auprc(scores, labels)?,
        roc: roc_curve(scores, labels)?,
        pr: pr_curve(scores, labels)?,
        calibration: Calibration {
            ece,
            brier: brier(scores, labels),
            bins,
        },
        threshold,
        n_patients: uniq.len(),
        n_windows: scores.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeLong {
    pub delta_auc: f64,
    pub z: f64,
    pub p: f64,
}

fn structural_components(scores: &[f64], labels: &[u8]) -> (f64, Vec<f64>, Vec<f64>) {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y != 1).map(|(s, _)| *s).collect();
    let (m, n) = (pos.len(), neg.len());
    let all: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    let r_all = midranks(&all);
    let r_pos = midranks(&pos);
    let r_neg = midranks(&neg);
    let v10: Vec<f64> = (0..m).map(|i| (r_all[i] - r_pos[i]) / n as f64).collect();
    let v01: Vec<f64> = (0..n).map(|j| 1.0 - (r_all[m + j] - r_neg[j]) / m as f64).collect();
    let auc = v10.iter().sum::<f64>() / m as f64;
    (auc, v10, v01)
}

fn cov(a: &[f64], b: &[f64]) -> f64 {
    let k = a.len() as f64;
    let ma = a.iter().sum::<f64>() / k;
    let mb = b.iter().sum::<f64>() / k;
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (k - 1.0).max(1.0)
}

/// Paired DeLong test on AUC(a) − AUC(b) using midrank structural components.
pub fn delong_test(scores_a: &[f64], scores_b: &[f64], labels: &[u8]) -> Result<DeLong> {
    let (m, n) = require_both("delong_test", labels)?;
    if scores_a.len() != labels.len() || scores_b.len() != labels.len() {
        return invalid("delong_test", "scores and labels differ in length");
    }
    let (auc_a, v10a, v01a) = structural_components(scores_a, labels);
    let (auc_b, v10b, v01b) = structural_components(scores_b, labels);
    let delta = auc_a - auc_b;
    let var = (cov(&v10a, &v10a) + cov(&v10b, &v10b) - 2.0 * cov(&v10a, &v10b)) / m as f64
        + (cov(&v01a, &v01a) + cov(&v01b, &v01b) - 2.0 * cov(&v01a, &v01b)) / n as f64;
    if var <= 1e-300 {
        let p = if delta == 0.0 { 1.0 } else { 0.0 };
        let z = if delta == 0.0 { 0.0 } else { delta.signum() * f64::INFINITY };
        return Ok(DeLong { delta_auc: delta, z, p });
    }
    let z = delta / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p = (2.0 * (1.0 - normal.cdf(z.abs()))).clamp(0.0, 1.0);
    Ok(DeLong { delta_auc: delta, z, p })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemar {
    pub b: usize,
    pub c: usize,
    pub p_exact: f64,
}

/// Exact two-sided McNemar: b counts (a right, b wrong), c the reverse.
pub fn mcnemar_test(correct_a: &[bool], correct_b: &[bool]) -> McNemar {
    let b = correct_a.iter().zip(correct_b).filter(|(&x, &y)| x && !y).count();
    let c = correct_a.iter().zip(correct_b).filter(|(&x, &y)| !x && y).count();
    let p_exact = if b + c == 0 {
        1.0
    } else {
        let bin = Binomial::new(0.5, (b + c) as u64).expect("valid binomial");
        (2.0 * bin.cdf(b.min(c) as u64)).min(1.0)
    };
    McNemar { b, c, p_exact }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapComparison {
    pub delta: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p: f64,
    pub n_resamples: usize,
    /// Resamples redrawn because they contained a single class.
    pub redraws: usize,
}

/// Indices grouped by patient, patients in sorted order.
fn patient_groups(patients: &[String]) -> Vec<Vec<usize>> {
    let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in patients.iter().enumerate() {
        map.entry(p.as_str()).or_default().push(i);
    }
    map.into_values().collect()
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

const MAX_CONSECUTIVE_REDRAWS: usize = 1000;

/// Patient-level resampling driver: calls `stat` on each accepted resample's
/// window indices. Resamples with a single class are redrawn.
pub fn patient_bootstrap(
    labels: &[u8],
    patients: &[String],
    n: usize,
    seed: u64,
    mut stat: impl FnMut(&[usize]) -> Result<f64>,
) -> Result<(Vec<f64>, usize)> {
    if labels.len() != patients.len() {
        return invalid("bootstrap", "labels and patient ids differ in length");
    }
    require_both("bootstrap", labels)?;
    let groups = patient_groups(patients);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut redraws = 0;
    let mut idx = Vec::new();
    while out.len() < n {
        let mut tries = 0;
        loop {
            idx.clear();
            for _ in 0..groups.len() {
                idx.extend_from_slice(&groups[rng.random_range(0..groups.len())]);
            }
            let pos = idx.iter().filter(|&&i| labels[i] == 1).count();
            if pos > 0 && pos < idx.len() {
                break;
            }
            redraws += 1;
            tries += 1;
            if tries >= MAX_CONSECUTIVE_REDRAWS {
                return invalid("bootstrap", "could not draw a two-class resample");
            }
        }
        out.push(stat(&idx)?);
    }
    Ok((out, redraws))
}

fn gather<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Paired patient-level bootstrap of metric(a) − metric(b). The two-sided p
/// comes from the resampled differences re-centred on zero; the CI is the
/// 95% percentile interval.
pub fn bootstrap_paired(
    scores_a: &[f64],
    scores_b: &[f64],
    labels: &[u8],
    patients: &[String],
    n: usize,
    seed: u64,
    metric: impl Fn(&[f64], &[u8]) -> Result<f64>,
) -> Result<BootstrapComparison> {
    if n == 0 {
        return invalid("bootstrap", "n must be positive");
    }
    let delta = metric(scores_a, labels)? - metric(scores_b, labels)?;
    let (mut deltas, redraws) = patient_bootstrap(labels, patients, n, seed, |idx| {
        let y = gather(labels, idx);
        Ok(metric(&gather(scores_a, idx), &y)? - metric(&gather(scores_b, idx), &y)?)
    })?;
    let extreme = deltas.iter().filter(|&&d| (d - delta).abs() >= delta.abs()).count();
    deltas.sort_by(f64::total_cmp);
    Ok(BootstrapComparison {
        delta,
        ci_low: quantile(&deltas, 0.025),
        ci_high: quantile(&deltas, 0.975),
        p: (1 + extreme) as f64 / (n + 1) as f64,
        n_resamples: n,
        redraws,
    })
}

pub fn bootstrap_auprc(
    scores_a: &[f64],
    scores_b: &[f64],
    labels: &[u8],
    patients: &[String],
    n: usize,
    seed: u64,
) -> Result<BootstrapComparison> {
    bootstrap_paired(scores_a, scores_b, labels, patients, n, seed, auprc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval95 {
    pub low: f64,
    pub high: f64,
}

/// Percentile CI of a single-model statistic over patient resamples.
pub fn bootstrap_ci(
    scores: &[f64],
    labels: &[u8],
    patients: &[String],
    n: usize,
    seed: u64,
    metric: impl Fn(&[f64], &[u8]) -> Result<f64>,
) -> Result<Interval95> {
    let (mut v, _) = patient_bootstrap(labels, patients, n, seed, |idx| metric(&gather(scores, idx), &gather(labels, idx)))?;
    v.sort_by(f64::total_cmp);
    Ok(Interval95 {
        low: quantile(&v, 0.025),
        high: quantile(&v, 0.975),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub delong: DeLong,
    pub mcnemar: McNemar,
    pub bootstrap_auprc: BootstrapComparison,
}

pub const BOOTSTRAP_RESAMPLES: usize = 2000;

/// Full paired comparison of two models scored on the same windows.
#[allow(clippy::too_many_arguments)]
pub fn compare(
    scores_a: &[f64],
    scores_b: &[f64],
    labels: &[u8],
    patients: &[String],
    threshold_a: f64,
    threshold_b: f64,
    n_resamples: usize,
    seed: u64,
) -> Result<ComparisonReport> {
    let correct = |s: &[f64], t: f64| -> Vec<bool> { s.iter().zip(labels).map(|(&v, &y)| u8::from(v >= t) == y).collect() };
    Ok(ComparisonReport {
        delong: delong_test(scores_a, scores_b, labels)?,
        mcnemar: mcnemar_test(&correct(scores_a, threshold_a), &correct(scores_b, threshold_b)),
        bootstrap_auprc: bootstrap_auprc(scores_a, scores_b, labels, patients, n_resamples, seed)?,
    })
}
