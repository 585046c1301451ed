//! Prepared window sets and split-scoped access. Test-split labels live in
//! a [`SealedSplit`] whose only readers are the final evaluation methods.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Manifest, Recording};
use crate::error::{invalid, Result};
use crate::stats::{self, ComparisonReport, EvalReport, Interval95};
use crate::windows::{split_patients, windows_for_recording, SplitAssignment, Window, WindowConfig};

/// Windows of every recording plus the patient split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub windows: Vec<Window>,
    pub split: SplitAssignment,
    pub warnings: usize,
}

pub fn prepare(
    manifest: &Manifest,
    recordings: &[Recording],
    ratios: (f64, f64, f64),
    window_cfg: &WindowConfig,
    seed: u64,
) -> Result<Prepared> {
    if recordings.is_empty() {
        return invalid("prepare", "empty corpus");
    }
    let split = split_patients(manifest, ratios, seed)?;
    let mut windows = Vec::new();
    let mut warnings = 0;
    for rec in recordings {
        let (w, warn) = windows_for_recording(rec, window_cfg);
        windows.extend(w);
        warnings += warn;
    }
    Ok(Prepared {
        windows,
        split,
        warnings,
    })
}

#[derive(Debug, Clone, Default)]
pub struct LabeledSplit {
    pub windows: Vec<Window>,
}

impl LabeledSplit {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.windows.iter().map(|w| w.label).collect()
    }

    pub fn patients(&self) -> Vec<String> {
        self.windows.iter().map(|w| w.patient_id.clone()).collect()
    }

    pub fn samples(&self) -> Vec<&[f32]> {
        self.windows.iter().map(|w| &w.samples[..]).collect()
    }

    pub fn require_both_classes(&self, op: &'static str) -> Result<()> {
        let pos = self.windows.iter().filter(|w| w.label == 1).count();
        if pos == 0 || pos == self.windows.len() {
            return invalid(op, "split contains a single class");
        }
        Ok(())
    }

    /// Patient ids with the patient-level label (positive if any window is).
    pub fn patient_labels(&self) -> BTreeMap<String, u8> {
        let mut m: BTreeMap<String, u8> = BTreeMap::new();
        for w in &self.windows {
            let e = m.entry(w.patient_id.clone()).or_default();
            *e = (*e).max(w.label);
        }
        m
    }

    pub fn restrict_to(&self, patients: &BTreeSet<String>) -> LabeledSplit {
        LabeledSplit {
            windows: self
                .windows
                .iter()
                .filter(|w| patients.contains(&w.patient_id))
                .cloned()
                .collect(),
        }
    }
}

/// Held-out windows. Inputs are public; labels are readable only through
/// the evaluation methods below.
#[derive(Debug, Clone, Default)]
pub struct SealedSplit {
    window_ids: Vec<String>,
    patients: Vec<String>,
    samples: Vec<Vec<f32>>,
    labels: Vec<u8>,
}

impl SealedSplit {
    pub fn seal(windows: Vec<Window>) -> Self {
        let mut s = Self::default();
        for w in windows {
            s.window_ids.push(w.window_id);
            s.patients.push(w.patient_id);
            s.samples.push(w.samples);
            s.labels.push(w.label);
        }
        s
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn window_ids(&self) -> &[String] {
        &self.window_ids
    }

    pub fn patients(&self) -> &[String] {
        &self.patients
    }

    pub fn samples(&self) -> Vec<&[f32]> {
        self.samples.iter().map(|s| &s[..]).collect()
    }

    fn check(&self, scores: &[f64]) -> Result<()> {
        if scores.len() != self.len() {
            return invalid("sealed evaluation", format!("{} scores for {} windows", scores.len(), self.len()));
        }
        Ok(())
    }

    pub fn evaluate(&self, scores: &[f64], threshold: f64) -> Result<EvalReport> {
        self.check(scores)?;
        stats::evaluate_scores(scores, &self.labels, &self.patients, threshold)
    }

    pub fn f1_interval(&self, scores: &[f64], threshold: f64, n: usize, seed: u64) -> Result<Interval95> {
        self.check(scores)?;
        stats::bootstrap_ci(scores, &self.labels, &self.patients, n, seed, |s, y| Ok(stats::f1_at(s, y, threshold)))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn compare(
        &self,
        scores_a: &[f64],
        scores_b: &[f64],
        threshold_a: f64,
        threshold_b: f64,
        n: usize,
        seed: u64,
    ) -> Result<ComparisonReport> {
        self.check(scores_a)?;
        self.check(scores_b)?;
        stats::compare(scores_a, scores_b, &self.labels, &self.patients, threshold_a, threshold_b, n, seed)
    }

    /// Writes `patient_id,true_label,score` lines; the only export path of
    /// held-out labels, used after final scoring.
    pub fn prediction_lines(&self, scores: &[f64]) -> Result<String> {
        self.check(scores)?;
        Ok(self
            .patients
            .iter()
            .zip(&self.labels)
            .zip(scores)
            .map(|((p, y), s)| format!("{p},{y},{s}\n"))
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: LabeledSplit,
    pub val: LabeledSplit,
    pub test: SealedSplit,
    pub split: SplitAssignment,
}

impl Dataset {
    pub fn from_windows(windows: Vec<Window>, split: SplitAssignment) -> Result<Self> {
        let mut parts: [Vec<Window>; 3] = Default::default();
        for w in windows {
            match split.split_of(&w.patient_id) {
                Some(k) => parts[k].push(w),
                None => return invalid("dataset", format!("patient {} is in no split", w.patient_id)),
            }
        }
        let [train, val, test] = parts;
        Ok(Self {
            train: LabeledSplit { windows: train },
            val: LabeledSplit { windows: val },
            test: SealedSplit::seal(test),
            split,
        })
    }
}

/// Stratified patient subset. Positives and negatives are each shuffled
/// once per seed and the first round(f·n) of each kept, so smaller
/// fractions are always subsets of larger ones.
pub fn nested_patient_subset(patient_labels: &BTreeMap<String, u8>, fraction: f64, seed: u64) -> Result<BTreeSet<String>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return invalid("label subset", format!("fraction {fraction} outside (0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeSet::new();
    for class in [1u8, 0] {
        let mut ids: Vec<&String> = patient_labels.iter().filter(|(_, &y)| y == class).map(|(p, _)| p).collect();
        ids.shuffle(&mut rng);
        let k = (fraction * ids.len() as f64).round() as usize;
        if k == 0 {
            return invalid("label subset", format!("fraction {fraction} leaves no class-{class} patient"));
        }
        out.extend(ids[..k].iter().map(|s| s.to_string()));
    }
    Ok(out)
}

pub fn label_subset(train: &LabeledSplit, fraction: f64, seed: u64) -> Result<LabeledSplit> {
    let keep = nested_patient_subset(&train.patient_labels(), fraction, seed)?;
    let sub = train.restrict_to(&keep);
    sub.require_both_classes("label subset")?;
    Ok(sub)
}
