//! Segment extraction, rollover-buffer windowing, patient-aware splitting,
//! minority oversampling, contrastive batching and episode construction.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{zscore, Manifest, Recording};
use crate::error::{invalid, io_err, Result};
use crate::signal::{self, SAMPLE_RATE};
use crate::views::{sample_nonempty_recipe, AugmentationRecipe};

pub const WINDOW_LEN: usize = 4000;
pub const MIN_SEGMENT_S: f64 = 0.2;
pub const MAX_SEGMENT_S: f64 = 3.2;
pub const NEGATIVE_TILE_S: f64 = 1.0;
pub const FALLBACK_HR_BPM: f64 = 72.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub recording_id: String,
    pub patient_id: String,
    pub label: u8,
    pub start_s: f64,
    pub end_s: f64,
    pub samples: Vec<f32>,
}

impl Segment {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Extraction {
    pub segments: Vec<Segment>,
    /// Intervals skipped for lying outside the recording.
    pub warnings: usize,
}

fn to_sample(t: f64) -> usize {
    (t * SAMPLE_RATE as f64).round() as usize
}

fn cut(rec: &Recording, label: u8, start_s: f64, end_s: f64) -> Segment {
    let a = to_sample(start_s).min(rec.samples.len());
    let len = to_sample(end_s - start_s);
    let b = (a + len).min(rec.samples.len());
    Segment {
        recording_id: rec.meta.recording_id.clone(),
        patient_id: rec.meta.patient_id.clone(),
        label,
        start_s,
        end_s,
        samples: rec.samples[a..b].to_vec(),
    }
}

/// Positive recordings yield one segment per in-bounds interval (split into
/// equal pieces when longer than 3.2 s); negative recordings are tiled into
/// 1 s pieces over the complement of the intervals. Pieces under 0.2 s are
/// dropped.
pub fn extract_segments(rec: &Recording) -> Extraction {
    let dur = rec.duration_s();
    let eps = 0.5 / SAMPLE_RATE as f64;
    let mut warnings = 0;
    let mut intervals = Vec::new();
    for iv in &rec.meta.murmur_intervals {
        if iv.start_s < 0.0 || iv.end_s > dur + eps || iv.start_s >= iv.end_s {
            warnings += 1;
        } else {
            intervals.push((iv.start_s, iv.end_s.min(dur)));
        }
    }
    intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut segments = Vec::new();
    if rec.meta.label == 1 {
        for (s, e) in intervals {
            let d = e - s;
            if d < MIN_SEGMENT_S {
                continue;
            }
            let pieces = (d / MAX_SEGMENT_S).ceil().max(1.0) as usize;
            let step = d / pieces as f64;
            for k in 0..pieces {
                let a = s + k as f64 * step;
                segments.push(cut(rec, 1, a, if k + 1 == pieces { e } else { a + step }));
            }
        }
    } else {
        let mut free = Vec::new();
        let mut cursor = 0.0;
        for (s, e) in intervals {
            if s > cursor {
                free.push((cursor, s));
            }
            cursor = f64::max(cursor, e);
        }
        if dur > cursor {
            free.push((cursor, dur));
        }
        for (s, e) in free {
            let mut a = s;
            while e - a >= MIN_SEGMENT_S - 1e-9 {
                let b = (a + NEGATIVE_TILE_S).min(e);
                segments.push(cut(rec, 0, a, b));
                a = b;
            }
        }
    }
    Extraction { segments, warnings }
}

/// Rate estimate from the autocorrelation of a smoothed amplitude envelope,
/// searching cycle lengths of 0.33–2.5 s. Falls back to 72 bpm.
pub fn estimate_heart_rate(samples: &[f32]) -> f64 {
    let fs = SAMPLE_RATE as f64;
    let hop = 40; // 100 Hz envelope
    let env: Vec<f64> = samples
        .chunks(hop)
        .map(|c| c.iter().map(|v| v.abs() as f64).sum::<f64>() / c.len() as f64)
        .collect();
    let efs = fs / hop as f64;
    let m = env.iter().sum::<f64>() / env.len().max(1) as f64;
    let e: Vec<f64> = env.iter().map(|v| v - m).collect();
    let r0: f64 = e.iter().map(|v| v * v).sum();
    let lo = (0.33 * efs).ceil() as usize;
    let hi = ((2.5 * efs).floor() as usize).min(e.len().saturating_sub(2));
    if r0 <= 0.0 || hi <= lo + 1 {
        return FALLBACK_HR_BPM;
    }
    let ac: Vec<f64> = (0..=hi + 1)
        .map(|lag| e.iter().zip(&e[lag..]).map(|(a, b)| a * b).sum::<f64>() / r0)
        .collect();
    let peaks: Vec<usize> = (lo..=hi)
        .filter(|&l| ac[l] > 0.1 && ac[l] >= ac[l - 1] && ac[l] >= ac[l + 1])
        .collect();
    let Some(best) = peaks.iter().map(|&l| ac[l]).reduce(f64::max) else {
        return FALLBACK_HR_BPM;
    };
    // The first strong peak is the fundamental; later ones are its multiples.
    let lag = peaks.into_iter().find(|&l| ac[l] >= 0.8 * best).expect("peak exists");
    60.0 * efs / lag as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub min_gap_ms: f64,
    pub max_gap_ms: f64,
    pub max_gap_cycles: f64,
    pub continuity_sigmas: f64,
    pub rms_ratio_range: (f64, f64),
    pub max_centroid_diff_hz: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            min_gap_ms: 50.0,
            max_gap_ms: 1000.0,
            max_gap_cycles: 1.5,
            continuity_sigmas: 6.0,
            rms_ratio_range: (0.2, 5.0),
            max_centroid_diff_hz: 150.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityFlags {
    pub temporal_continuity: bool,
    pub amplitude_consistency: bool,
    pub frequency_consistency: bool,
    pub rhythm_preserved: bool,
    pub label_pure: bool,
    pub source_unified: bool,
}

impl QualityFlags {
    pub fn all(&self) -> bool {
        self.temporal_continuity
            && self.amplitude_consistency
            && self.frequency_consistency
            && self.rhythm_preserved
            && self.label_pure
            && self.source_unified
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRef {
    pub recording_id: String,
    pub label: u8,
    pub start_s: f64,
    pub end_s: f64,
    /// Gap before this segment; 0 for the first.
    pub gap_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub window_id: String,
    pub patient_id: String,
    pub recording_id: String,
    pub label: u8,
    pub samples: Vec<f32>,
    pub source_segments: Vec<SourceRef>,
    pub quality: QualityFlags,
}

fn gap_ok(gap_ms: f64, hr_bpm: f64, cfg: &WindowConfig) -> bool {
    gap_ms >= cfg.min_gap_ms
        && gap_ms <= cfg.max_gap_ms
        && gap_ms <= cfg.max_gap_cycles * 60_000.0 / hr_bpm
}

fn quality(parts: &[&[f32]], sources: &[SourceRef], hr_bpm: f64, cfg: &WindowConfig) -> QualityFlags {
    let joined: Vec<f32> = parts.concat();
    let sigma = signal::std_dev(&joined);
    let fs = SAMPLE_RATE as f64;
    let mut continuity = true;
    let mut amplitude = true;
    let mut frequency = true;
    for w in parts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if let (Some(&x), Some(&y)) = (a.last(), b.first()) {
            continuity &= ((x - y).abs() as f64) < cfg.continuity_sigmas * sigma;
        }
        let (ra, rb) = (signal::rms(a), signal::rms(b));
        let ratio = if rb > 0.0 { ra / rb } else { f64::INFINITY };
        amplitude &= ratio >= cfg.rms_ratio_range.0 && ratio <= cfg.rms_ratio_range.1;
        frequency &= (signal::spectral_centroid(a, fs) - signal::spectral_centroid(b, fs)).abs()
            < cfg.max_centroid_diff_hz;
    }
    QualityFlags {
        temporal_continuity: continuity,
        amplitude_consistency: amplitude,
        frequency_consistency: frequency,
        rhythm_preserved: sources.iter().skip(1).all(|s| gap_ok(s.gap_ms, hr_bpm, cfg)),
        label_pure: sources.iter().all(|s| s.label == sources[0].label),
        source_unified: sources.iter().all(|s| s.recording_id == sources[0].recording_id),
    }
}

pub fn build_windows(segments: &[Segment], hr_estimate_bpm: f64) -> Vec<Window> {
    build_windows_with(segments, hr_estimate_bpm, &WindowConfig::default())
}

/// Greedy rollover buffer: consecutive segments of the same recording and
/// label are joined while every gap obeys the gap rules; once the buffer
/// holds 4000 samples a window is cut and the remainder discarded. A buffer
/// still short at a chain break is dropped. Window samples are z-scored.
pub fn build_windows_with(segments: &[Segment], hr_estimate_bpm: f64, cfg: &WindowConfig) -> Vec<Window> {
    let mut out = Vec::new();
    let mut buf: Vec<(usize, f64)> = Vec::new();
    let mut held = 0;
    let mut counters: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, s) in segments.iter().enumerate() {
        let gap_ms = match buf.last() {
            Some(&(j, _)) => {
                let prev = &segments[j];
                let gap = (s.start_s - prev.end_s) * 1000.0;
                if prev.recording_id != s.recording_id || prev.label != s.label || !gap_ok(gap, hr_estimate_bpm, cfg) {
                    buf.clear();
                    held = 0;
                    0.0
                } else {
                    gap
                }
            }
            None => 0.0,
        };
        buf.push((i, gap_ms));
        held += s.samples.len();
        if held < WINDOW_LEN {
            continue;
        }
        let mut parts: Vec<&[f32]> = Vec::new();
        let mut need = WINDOW_LEN;
        let mut sources = Vec::new();
        for &(j, gap) in &buf {
            let seg = &segments[j];
            let take = need.min(seg.samples.len());
            parts.push(&seg.samples[..take]);
            need -= take;
            sources.push(SourceRef {
                recording_id: seg.recording_id.clone(),
                label: seg.label,
                start_s: seg.start_s,
                end_s: seg.end_s,
                gap_ms: gap,
            });
        }
        let flags = quality(&parts, &sources, hr_estimate_bpm, cfg);
        let raw: Vec<f32> = parts.concat();
        let first = &segments[buf[0].0];
        let k = counters.entry(first.recording_id.as_str()).or_default();
        out.push(Window {
            window_id: format!("{}-w{:03}", first.recording_id, *k),
            patient_id: first.patient_id.clone(),
            recording_id: first.recording_id.clone(),
            label: first.label,
            samples: zscore(&raw).expect("window has 4000 samples"),
            source_segments: sources,
            quality: flags,
        });
        *k += 1;
        buf.clear();
        held = 0;
    }
    out
}

/// Segments, heart-rate estimate and windows for one recording.
pub fn windows_for_recording(rec: &Recording, cfg: &WindowConfig) -> (Vec<Window>, usize) {
    let ex = extract_segments(rec);
    let hr = estimate_heart_rate(&rec.samples);
    (build_windows_with(&ex.segments, hr, cfg), ex.warnings)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
    /// Patient-level murmur prevalence of train, val, test.
    pub prevalence: [f64; 3],
}

impl SplitAssignment {
    pub fn split_of(&self, patient: &str) -> Option<usize> {
        [&self.train, &self.val, &self.test]
            .iter()
            .position(|s| s.contains(patient))
    }
}

fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let mut rest = total - alloc.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        alloc[i] += 1;
        rest -= 1;
    }
    alloc
}

/// Patient-level stratified split. Split sizes are round(r·n) for the first
/// two ratios and the remainder for the last; positive patients are spread
/// across splits in proportion to split size.
pub fn split_patients(manifest: &Manifest, ratios: (f64, f64, f64), seed: u64) -> Result<SplitAssignment> {
    let mut positive: BTreeMap<String, bool> = BTreeMap::new();
    for e in &manifest.entries {
        *positive.entry(e.patient_id.clone()).or_default() |= e.label == 1;
    }
    let n = positive.len();
    if n < 5 {
        return invalid("split_patients", format!("{n} patients, need at least 5"));
    }
    let (r0, r1, r2) = ratios;
    if !(r0 > 0.0 && r1 > 0.0 && r2 > 0.0) {
        return invalid("split_patients", "ratios must be positive");
    }
    let sum = r0 + r1 + r2;
    let n_train = (n as f64 * r0 / sum).round() as usize;
    let n_val = (n as f64 * r1 / sum).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return invalid("split_patients", format!("{n} patients cannot fill every split"));
    }
    let sizes = [n_train, n_val, n - n_train - n_val];
    let mut pos: Vec<String> = positive.iter().filter(|(_, &v)| v).map(|(k, _)| k.clone()).collect();
    let mut neg: Vec<String> = positive.iter().filter(|(_, &v)| !v).map(|(k, _)| k.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let weights: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
    let pos_alloc = largest_remainder(pos.len(), &weights);
    let mut sets: [BTreeSet<String>; 3] = Default::default();
    let (mut pi, mut ni) = (0, 0);
    for k in 0..3 {
        for _ in 0..pos_alloc[k] {
            sets[k].insert(pos[pi].clone());
            pi += 1;
        }
        for _ in 0..sizes[k] - pos_alloc[k] {
            sets[k].insert(neg[ni].clone());
            ni += 1;
        }
    }
    let prevalence = [0, 1, 2].map(|k| pos_alloc[k] as f64 / sizes[k] as f64);
    let [train, val, test] = sets;
    Ok(SplitAssignment {
        train,
        val,
        test,
        prevalence,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    /// Index into the training windows the plan was built from.
    pub window: usize,
    pub recipe: AugmentationRecipe,
}

/// Plan of augmented minority copies that brings the class ratio to 1:1.
/// Minority windows are cycled in a seeded order so copies spread evenly.
pub fn oversample_minority(train_windows: &[Window], seed: u64) -> Result<Vec<PlanEntry>> {
    let pos: Vec<usize> = (0..train_windows.len()).filter(|&i| train_windows[i].label == 1).collect();
    let neg: Vec<usize> = (0..train_windows.len()).filter(|&i| train_windows[i].label == 0).collect();
    if pos.is_empty() || neg.is_empty() {
        return invalid("oversample_minority", "training windows contain a single class");
    }
    let (mut minority, deficit) = if pos.len() < neg.len() {
        (pos.clone(), neg.len() - pos.len())
    } else {
        (neg.clone(), pos.len() - neg.len())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    minority.shuffle(&mut rng);
    Ok((0..deficit)
        .map(|k| PlanEntry {
            window: minority[k % minority.len()],
            recipe: sample_nonempty_recipe(&mut rng),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub support: Vec<(usize, u8)>,
    pub query: Vec<(usize, u8)>,
}

/// Per class, support takes max(1, min(k_shot, ⌊n_c/2⌋)) members in a seeded
/// order and query takes the rest. Classes are visited in ascending order.
pub fn make_episode(batch: &[(usize, u8)], k_shot: usize, seed: u64) -> Result<Episode> {
    let mut by_class: BTreeMap<u8, Vec<(usize, u8)>> = BTreeMap::new();
    for &item in batch {
        by_class.entry(item.1).or_default().push(item);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ep = Episode {
        support: Vec::new(),
        query: Vec::new(),
    };
    for (c, mut members) in by_class {
        if members.len() < 2 {
            return invalid("make_episode", format!("class {c} has a single member"));
        }
        members.shuffle(&mut rng);
        let s = k_shot.min(members.len() / 2).max(1);
        ep.support.extend_from_slice(&members[..s]);
        ep.query.extend_from_slice(&members[s..]);
    }
    Ok(ep)
}

/// Shuffled mini-batches of indices; a trailing batch of fewer than two is
/// dropped because contrastive losses need a negative.
pub fn contrastive_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.chunks(batch_size.max(1))
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexLine {
    window_id: String,
    patient_id: String,
    recording_id: String,
    label: u8,
    offset: usize,
    len: usize,
    source_segments: Vec<SourceRef>,
    quality: QualityFlags,
}

/// Writes `samples.f32` (little-endian float32 blocks) and `index.jsonl`.
pub fn save_window_set(dir: &Path, windows: &[Window]) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut blob = Vec::with_capacity(windows.len() * WINDOW_LEN * 4);
    let mut index = Vec::new();
    for w in windows {
        let offset = blob.len();
        for v in &w.samples {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        serde_json::to_writer(
            &mut index,
            &IndexLine {
                window_id: w.window_id.clone(),
                patient_id: w.patient_id.clone(),
                recording_id: w.recording_id.clone(),
                label: w.label,
                offset,
                len: w.samples.len(),
                source_segments: w.source_segments.clone(),
                quality: w.quality,
            },
        )?;
        index.push(b'\n');
    }
    let p = dir.join("samples.f32");
    fs::write(&p, blob).map_err(io_err(&p))?;
    let p = dir.join("index.jsonl");
    let mut f = fs::File::create(&p).map_err(io_err(&p))?;
    f.write_all(&index).map_err(io_err(&p))
}

pub fn load_window_set(dir: &Path) -> Result<Vec<Window>> {
    let p = dir.join("samples.f32");
    let blob = fs::read(&p).map_err(io_err(&p))?;
    let p = dir.join("index.jsonl");
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let e: IndexLine = serde_json::from_str(line).map_err(|err| crate::error::Error::ManifestLine {
            line: i + 1,
            msg: err.to_string(),
        })?;
        let end = e.offset + e.len * 4;
        let Some(bytes) = blob.get(e.offset..end) else {
            return invalid("load_window_set", format!("window `{}` exceeds samples.f32", e.window_id));
        };
        out.push(Window {
            window_id: e.window_id,
            patient_id: e.patient_id,
            recording_id: e.recording_id,
            label: e.label,
            samples: bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
            source_segments: e.source_segments,
            quality: e.quality,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn largest_remainder_sums() {
        assert_eq!(largest_remainder(5, &[6.0, 2.0, 2.0]), vec![3, 1, 1]);
        assert_eq!(largest_remainder(0, &[6.0, 2.0, 2.0]), vec![0, 0, 0]);
        assert_eq!(largest_remainder(7, &[1.0, 1.0, 1.0]).iter().sum::<usize>(), 7);
    }

    #[test]
    fn contrastive_batches_drop_singletons() {
        let b = contrastive_batches(65, 32, 1);
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|c| c.len() == 32));
        assert_eq!(contrastive_batches(66, 32, 1).len(), 3);
    }
}
