//! Small DSP helpers shared by corpus generation, windowing and views.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub const SAMPLE_RATE: u32 = 4000;

pub fn mean(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64
}

pub fn power(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64
}

pub fn rms(x: &[f32]) -> f64 {
    power(x).sqrt()
}

/// Population standard deviation.
pub fn std_dev(x: &[f32]) -> f64 {
    let m = mean(x);
    let v = x.iter().map(|&a| (a as f64 - m).powi(2)).sum::<f64>() / x.len().max(1) as f64;
    v.sqrt()
}

pub fn fft(buf: &mut [Complex<f64>]) {
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(buf.len()).process(buf);
}

pub fn ifft(buf: &mut [Complex<f64>]) {
    let mut planner = FftPlanner::new();
    planner.plan_fft_inverse(buf.len()).process(buf);
    let n = buf.len() as f64;
    buf.iter_mut().for_each(|c| *c /= n);
}

/// One-sided power spectrum |X_k|^2 for k = 0..=n/2.
pub fn power_spectrum(x: &[f32]) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    fft(&mut buf);
    buf[..x.len() / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
}

/// Frequency in Hz of the largest non-DC spectral bin.
pub fn dominant_frequency(x: &[f32], fs: f64) -> f64 {
    let p = power_spectrum(x);
    let k = (1..p.len())
        .max_by(|&a, &b| p[a].total_cmp(&p[b]))
        .unwrap_or(0);
    k as f64 * fs / x.len() as f64
}

pub fn band_power(x: &[f32], fs: f64, lo: f64, hi: f64) -> f64 {
    let p = power_spectrum(x);
    let df = fs / x.len() as f64;
    p.iter()
        .enumerate()
        .filter(|(k, _)| {
            let f = *k as f64 * df;
            f >= lo && f <= hi
        })
        .map(|(_, v)| v)
        .sum()
}

/// Power-weighted mean frequency; 0 for a silent signal.
pub fn spectral_centroid(x: &[f32], fs: f64) -> f64 {
    let p = power_spectrum(x);
    let df = fs / x.len() as f64;
    let total: f64 = p.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    p.iter().enumerate().map(|(k, v)| k as f64 * df * v).sum::<f64>() / total
}

/// Modified Bessel function of the first kind, order 0 (power series).
pub fn bessel_i0(x: f64) -> f64 {
    let q = (x / 2.0).powi(2);
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

pub const KAISER_BETA: f64 = 8.0;
pub const RESAMPLE_HALF_TAPS: usize = 16;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Kaiser-windowed sinc interpolation between arbitrary rates. The kernel
/// spans 32 zero crossings of the anti-aliasing low-pass at
/// `min(1, to/from)` of the source Nyquist.
pub fn resample(x: &[f32], from_hz: f64, to_hz: f64) -> Vec<f32> {
    if (from_hz - to_hz).abs() < 1e-9 || x.is_empty() {
        return x.to_vec();
    }
    let ratio = to_hz / from_hz;
    let out_len = ((x.len() as f64) * ratio).round().max(1.0) as usize;
    let cutoff = ratio.min(1.0);
    let half_width = RESAMPLE_HALF_TAPS as f64 / cutoff;
    let i0_beta = bessel_i0(KAISER_BETA);
    (0..out_len)
        .map(|n| {
            let t = n as f64 / ratio;
            let lo = (t - half_width).ceil().max(0.0) as usize;
            let hi = ((t + half_width).floor() as usize).min(x.len() - 1);
            let mut acc = 0.0;
            for (i, &v) in x.iter().enumerate().take(hi + 1).skip(lo) {
                let d = i as f64 - t;
                let r = d / half_width;
                let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
                acc += v as f64 * cutoff * sinc(cutoff * d) * w;
            }
            acc as f32
        })
        .collect()
}

/// Direct-form I biquad with RBJ cookbook coefficients.
#[derive(Debug, Clone, Copy)]
pub struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    pub fn lowpass(fs: f64, f0: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * f0 / fs;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b: [(1.0 - c) / 2.0 / a0, (1.0 - c) / a0, (1.0 - c) / 2.0 / a0],
            a: [-2.0 * c / a0, (1.0 - alpha) / a0],
        }
    }

    pub fn highpass(fs: f64, f0: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * f0 / fs;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b: [(1.0 + c) / 2.0 / a0, -(1.0 + c) / a0, (1.0 + c) / 2.0 / a0],
            a: [-2.0 * c / a0, (1.0 - alpha) / a0],
        }
    }

    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&v| {
                let v = v as f64;
                let y = self.b[0] * v + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
                x2 = x1;
                x1 = v;
                y2 = y1;
                y1 = y;
                y as f32
            })
            .collect()
    }
}
