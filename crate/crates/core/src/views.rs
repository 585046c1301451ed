//! Stochastic views for contrastive learning: waveform augmentations, the
//! log-mel front end and spectrogram masking.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::signal::{self, Biquad, SAMPLE_RATE};
use crate::windows::WINDOW_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugOp {
    GaussNoise { sigma: f64 },
    TimeShift { ms: f64 },
    PitchShift { semitones: f64 },
    AmpScale { factor: f64 },
    SnrNoise { db: f64 },
    Bandpass { lo_hz: f64, hi_hz: f64 },
}

impl AugOp {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            AugOp::GaussNoise { sigma } => (0.001..=0.01).contains(&sigma),
            AugOp::TimeShift { ms } => (-100.0..=100.0).contains(&ms),
            AugOp::PitchShift { semitones } => semitones.abs() <= 2.0,
            AugOp::AmpScale { factor } => (0.8..=1.2).contains(&factor),
            AugOp::SnrNoise { db } => (20.0..=30.0).contains(&db),
            AugOp::Bandpass { lo_hz, hi_hz } => (15.0..=25.0).contains(&lo_hz) && (450.0..=550.0).contains(&hi_hz),
        };
        if ok {
            Ok(())
        } else {
            invalid("augment_wave", format!("parameter out of range: {self:?}"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecipe {
    pub ops: Vec<AugOp>,
    /// Seeds the noise ops.
    pub seed: u64,
}

impl AugmentationRecipe {
    pub fn identity() -> Self {
        Self {
            ops: Vec::new(),
            seed: 0,
        }
    }
}

pub const OP_PROBABILITY: f64 = 0.5;

/// Visits the catalogue in fixed order, including each op with probability
/// 0.5 and drawing its parameter uniformly from the allowed range.
pub fn sample_recipe(rng: &mut impl Rng) -> AugmentationRecipe {
    let mut ops = Vec::new();
    if rng.random_bool(OP_PROBABILITY) {
        ops.push(AugOp::GaussNoise {
            sigma: rng.random_range(0.001..=0.01),
        });
    }
    if rng.random_bool(OP_PROBABILITY) {
        ops.push(AugOp::TimeShift {
            ms: rng.random_range(-100.0..=100.0),
        });
    }
    if rng.random_bool(OP_PROBABILITY) {
        ops.push(AugOp::PitchShift {
            semitones: rng.random_range(-2.0..=2.0),
        });
    }
    if rng.random_bool(OP_PROBABILITY) {
        ops.push(AugOp::AmpScale {
            factor: rng.random_range(0.8..=1.2),
        });
    }
    if rng.random_bool(OP_PROBABILITY) {
        ops.push(AugOp::SnrNoise {
            db: rng.random_range(20.0..=30.0),
        });
    }
    if rng.random_bool(OP_PROBABILITY) {
        ops.push(AugOp::Bandpass {
            lo_hz: rng.random_range(15.0..=25.0),
            hi_hz: rng.random_range(450.0..=550.0),
        });
    }
    AugmentationRecipe {
        ops,
        seed: rng.random(),
    }
}

pub fn sample_nonempty_recipe(rng: &mut impl Rng) -> AugmentationRecipe {
    loop {
        let r = sample_recipe(rng);
        if !r.ops.is_empty() {
            return r;
        }
    }
}

/// Applies the recipe's ops in order; the output always has the input length.
pub fn augment_wave(samples: &[f32], recipe: &AugmentationRecipe) -> Result<Vec<f32>> {
    for op in &recipe.ops {
        op.validate()?;
    }
    let fs = SAMPLE_RATE as f64;
    let n = samples.len();
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let mut x = samples.to_vec();
    for op in &recipe.ops {
        x = match *op {
            AugOp::GaussNoise { sigma } => x
                .iter()
                .map(|&v| (v as f64 + sigma * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect(),
            AugOp::TimeShift { ms } => {
                if n == 0 {
                    x
                } else {
                    let k = (ms * fs / 1000.0).round() as i64;
                    let k = k.rem_euclid(n as i64) as usize;
                    let mut y = x.clone();
                    y.rotate_right(k);
                    y
                }
            }
            AugOp::PitchShift { semitones } => {
                let ratio = 2f64.powf(semitones / 12.0);
                let mut y = signal::resample(&x, fs, fs / ratio);
                y.resize(n, 0.0);
                y
            }
            AugOp::AmpScale { factor } => x.iter().map(|&v| (v as f64 * factor) as f32).collect(),
            AugOp::SnrNoise { db } => {
                let ps = signal::power(&x);
                let noise: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let pn = noise.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64;
                let scale = if ps > 0.0 && pn > 0.0 {
                    (ps / 10f64.powf(db / 10.0) / pn).sqrt()
                } else {
                    0.0
                };
                x.iter().zip(&noise).map(|(&v, e)| (v as f64 + scale * e) as f32).collect()
            }
            AugOp::Bandpass { lo_hz, hi_hz } => {
                let hp = Biquad::highpass(fs, lo_hz, FRAC_1_SQRT_2).apply(&x);
                Biquad::lowpass(fs, hi_hz, FRAC_1_SQRT_2).apply(&hp)
            }
        };
    }
    Ok(x)
}

pub const N_FFT: usize = 256;
pub const HOP: usize = 64;
pub const N_MELS: usize = 64;
pub const F_LO: f64 = 25.0;
pub const F_HI: f64 = 2000.0;
pub const LOG_FLOOR: f64 = 1e-6;

pub const fn n_frames(len: usize) -> usize {
    if len < N_FFT {
        0
    } else {
        (len - N_FFT) / HOP + 1
    }
}

pub const MEL_FRAMES: usize = n_frames(WINDOW_LEN);

/// Row-major `[n_mels × n_frames]` standardized log-mel power.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpec {
    pub n_mels: usize,
    pub n_frames: usize,
    pub bins: Vec<f32>,
}

impl MelSpec {
    pub fn at(&self, mel: usize, frame: usize) -> f32 {
        self.bins[mel * self.n_frames + frame]
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Centre frequencies of the 64 triangular filters.
pub fn mel_centers() -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(F_LO), hz_to_mel(F_HI));
    (1..=N_MELS)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

/// `[n_mels × (N_FFT/2 + 1)]` triangular weights evaluated at FFT bin centres.
pub fn mel_filterbank() -> &'static [Vec<f64>] {
    static FB: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    FB.get_or_init(|| {
        let (lo, hi) = (hz_to_mel(F_LO), hz_to_mel(F_HI));
        let edges: Vec<f64> = (0..N_MELS + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
            .collect();
        let nb = N_FFT / 2 + 1;
        (0..N_MELS)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..nb)
                    .map(|k| {
                        let f = k as f64 * SAMPLE_RATE as f64 / N_FFT as f64;
                        if f > l && f <= c {
                            (f - l) / (c - l)
                        } else if f > c && f < r {
                            (r - f) / (r - c)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect()
    })
}

fn hann() -> &'static [f64] {
    static W: OnceLock<Vec<f64>> = OnceLock::new();
    W.get_or_init(|| {
        (0..N_FFT)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / N_FFT as f64).cos())
            .collect()
    })
}

/// Periodic-Hann STFT without centre padding → mel power → ln(p + 1e-6) →
/// z-score over the whole spectrogram (constant spectrograms become zeros).
pub fn logmel(samples: &[f32]) -> MelSpec {
    let frames = n_frames(samples.len());
    let fb = mel_filterbank();
    let w = hann();
    let mut planner = rustfft::FftPlanner::<f64>::new();
    let plan = planner.plan_fft_forward(N_FFT);
    let mut out = vec![0.0f64; N_MELS * frames];
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    for t in 0..frames {
        let s = &samples[t * HOP..t * HOP + N_FFT];
        for i in 0..N_FFT {
            buf[i] = Complex::new(s[i] as f64 * w[i], 0.0);
        }
        plan.process(&mut buf);
        let p: Vec<f64> = buf[..=N_FFT / 2].iter().map(|c| c.norm_sqr()).collect();
        for (m, row) in fb.iter().enumerate() {
            let e: f64 = row.iter().zip(&p).map(|(a, b)| a * b).sum();
            out[m * frames + t] = (e + LOG_FLOOR).ln();
        }
    }
    let n = out.len().max(1) as f64;
    let mean = out.iter().sum::<f64>() / n;
    let sd = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let bins = if sd < 1e-8 {
        vec![0.0; out.len()]
    } else {
        out.iter().map(|v| ((v - mean) / sd) as f32).collect()
    };
    MelSpec {
        n_mels: N_MELS,
        n_frames: frames,
        bins,
    }
}

pub const MASK_VALUE: f32 = 0.0;

pub fn apply_time_mask(spec: &mut MelSpec, start: usize, width: usize) {
    for m in 0..spec.n_mels {
        for t in start..(start + width).min(spec.n_frames) {
            spec.bins[m * spec.n_frames + t] = MASK_VALUE;
        }
    }
}

pub fn apply_freq_mask(spec: &mut MelSpec, start: usize, width: usize) {
    for m in start..(start + width).min(spec.n_mels) {
        let row = m * spec.n_frames;
        spec.bins[row..row + spec.n_frames].fill(MASK_VALUE);
    }
}

/// Seeded time and frequency masks, each of width uniform in [1, max_width].
pub fn augment_spec(spec: &MelSpec, n_time_masks: usize, n_freq_masks: usize, max_width: usize, seed: u64) -> Result<MelSpec> {
    if max_width == 0 {
        return invalid("augment_spec", "max_width must be at least 1");
    }
    if (n_time_masks > 0 && max_width > spec.n_frames) || (n_freq_masks > 0 && max_width > spec.n_mels) {
        return invalid("augment_spec", format!("max_width {max_width} exceeds the masked axis"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = spec.clone();
    for _ in 0..n_time_masks {
        let w = rng.random_range(1..=max_width);
        let s = rng.random_range(0..=spec.n_frames - w);
        apply_time_mask(&mut out, s, w);
    }
    for _ in 0..n_freq_masks {
        let w = rng.random_range(1..=max_width);
        let s = rng.random_range(0..=spec.n_mels - w);
        apply_freq_mask(&mut out, s, w);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub time_masks: usize,
    pub freq_masks: usize,
    pub max_width: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            time_masks: 2,
            freq_masks: 2,
            max_width: 8,
        }
    }
}

/// One contrastive view: a waveform recipe, then log-mel of the augmented
/// waveform with spectrogram masks on top.
#[derive(Debug, Clone)]
pub struct View {
    pub wave: Vec<f32>,
    pub spec: MelSpec,
}

pub fn make_view(samples: &[f32], masks: &MaskConfig, rng: &mut impl Rng) -> Result<View> {
    let recipe = sample_recipe(rng);
    let wave = augment_wave(samples, &recipe)?;
    let spec = augment_spec(&logmel(&wave), masks.time_masks, masks.freq_masks, masks.max_width, rng.random())?;
    Ok(View { wave, spec })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count() {
        assert_eq!(MEL_FRAMES, 59);
    }

    #[test]
    fn mel_round_trip() {
        for f in [25.0, 100.0, 1000.0, 2000.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
    }

    #[test]
    fn every_filter_has_support() {
        for row in mel_filterbank() {
            assert!(row.iter().any(|&w| w > 0.0));
        }
    }
}
