//! Recording manifests, waveform ingestion and the synthetic phonocardiogram
//! generator.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::signal::{self, SAMPLE_RATE};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Site {
    #[serde(rename = "AV")]
    Av,
    #[serde(rename = "MV")]
    Mv,
    #[serde(rename = "PV")]
    Pv,
    #[serde(rename = "TV")]
    Tv,
    #[serde(rename = "OTHER")]
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingMeta {
    pub recording_id: String,
    pub patient_id: String,
    /// Relative paths resolve against the manifest's directory on load.
    pub path: PathBuf,
    pub label: u8,
    pub site: Site,
    pub sample_rate_hz: u32,
    #[serde(default)]
    pub murmur_intervals: Vec<Interval>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub schema_version: u32,
    pub entries: Vec<RecordingMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub meta: RecordingMeta,
    /// Always at [`SAMPLE_RATE`].
    pub samples: Vec<f32>,
}

impl Recording {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }
}

#[derive(Deserialize)]
struct RawMeta {
    recording_id: String,
    patient_id: String,
    path: PathBuf,
    label: i64,
    site: Site,
    sample_rate_hz: u32,
    #[serde(default)]
    murmur_intervals: Vec<Interval>,
}

impl Manifest {
    pub fn new(entries: Vec<RecordingMeta>) -> Result<Self> {
        let m = Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            entries,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.recording_id.as_str()) {
                return Err(Error::DuplicateId(e.recording_id.clone()));
            }
            if e.patient_id.is_empty() {
                return invalid("manifest", format!("recording `{}` has no patient_id", e.recording_id));
            }
            if e.label > 1 {
                return Err(Error::UnknownLabel {
                    id: e.recording_id.clone(),
                    label: e.label as i64,
                });
            }
            if e.sample_rate_hz == 0 {
                return invalid("manifest", format!("recording `{}` has sample_rate_hz 0", e.recording_id));
            }
            for iv in &e.murmur_intervals {
                if !(iv.start_s >= 0.0 && iv.start_s < iv.end_s) {
                    return Err(Error::IntervalOrder {
                        id: e.recording_id.clone(),
                        start_s: iv.start_s,
                        end_s: iv.end_s,
                    });
                }
            }
        }
        Ok(())
    }

    /// Distinct patient ids in first-appearance order.
    pub fn patients(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.entries
            .iter()
            .filter(|e| seen.insert(e.patient_id.as_str()))
            .map(|e| e.patient_id.clone())
            .collect()
    }

    /// Writes JSONL with a leading `{"schema_version": N}` line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        serde_json::to_writer(&mut out, &serde_json::json!({"schema_version": self.schema_version}))?;
        out.push(b'\n');
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        f.write_all(&out).map_err(io_err(path))
    }
}

/// Parses a JSONL manifest. An optional first line holding only
/// `schema_version` sets the version; otherwise it defaults to the current one.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut schema_version = MANIFEST_SCHEMA_VERSION;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::ManifestLine { line: lineno, msg };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if entries.is_empty() && value.get("recording_id").is_none() {
            if let Some(v) = value.get("schema_version").and_then(|v| v.as_u64()) {
                schema_version = v as u32;
                if schema_version != MANIFEST_SCHEMA_VERSION {
                    return Err(bad(format!(
                        "schema_version {schema_version} unsupported (expected {MANIFEST_SCHEMA_VERSION})"
                    )));
                }
                continue;
            }
        }
        let raw: RawMeta = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
        if !(0..=1).contains(&raw.label) {
            return Err(Error::UnknownLabel {
                id: raw.recording_id,
                label: raw.label,
            });
        }
        let path = if raw.path.is_absolute() {
            raw.path
        } else {
            base.join(raw.path)
        };
        entries.push(RecordingMeta {
            recording_id: raw.recording_id,
            patient_id: raw.patient_id,
            path,
            label: raw.label as u8,
            site: raw.site,
            sample_rate_hz: raw.sample_rate_hz,
            murmur_intervals: raw.murmur_intervals,
        });
    }
    let m = Manifest {
        schema_version,
        entries,
    };
    m.validate()?;
    Ok(m)
}

/// Reads a mono PCM16 or float32 WAV, scales to [-1, 1] and resamples to
/// [`SAMPLE_RATE`] when needed.
pub fn read_recording(meta: &RecordingMeta) -> Result<Recording> {
    let path = &meta.path;
    let audio = |msg: String| Error::Audio {
        path: path.clone(),
        msg,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| audio(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(audio(format!("{} channels, expected mono", spec.channels)));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (hound::SampleFormat::Float, 32) => reader.samples::<f32>().collect::<std::result::Result<_, _>>(),
        (f, b) => return Err(audio(format!("unsupported sample format {f:?}/{b} bit"))),
    }
    .map_err(|e| audio(e.to_string()))?;
    if samples.is_empty() {
        return Err(audio("zero-length audio".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(audio("non-finite samples".into()));
    }
    let samples = if spec.sample_rate != SAMPLE_RATE {
        signal::resample(&samples, spec.sample_rate as f64, SAMPLE_RATE as f64)
    } else {
        samples
    };
    let mut meta = meta.clone();
    meta.sample_rate_hz = SAMPLE_RATE;
    Ok(Recording { meta, samples })
}

pub fn write_wav_f32(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let audio = |e: hound::Error| Error::Audio {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(audio)?;
    for &s in samples {
        w.write_sample(s).map_err(audio)?;
    }
    w.finalize().map_err(audio)
}

pub fn write_wav_pcm16(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let audio = |e: hound::Error| Error::Audio {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(audio)?;
    for &s in samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)
            .map_err(audio)?;
    }
    w.finalize().map_err(audio)
}

/// Standardizes to zero mean and unit population variance. Signals with
/// σ < 1e-8 map to zeros.
pub fn zscore(samples: &[f32]) -> Result<Vec<f32>> {
    if samples.len() < 2 {
        return invalid("zscore", format!("length {} < 2", samples.len()));
    }
    let m = signal::mean(samples);
    let sd = signal::std_dev(samples);
    if sd < 1e-8 {
        return Ok(vec![0.0; samples.len()]);
    }
    Ok(samples.iter().map(|&v| ((v as f64 - m) / sd) as f32).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_patients: usize,
    pub recordings_per_patient: usize,
    pub duration_s: f64,
    pub heart_rate_bpm_range: (f64, f64),
    pub murmur_prevalence: f64,
    pub murmur_band_hz: (f64, f64),
    pub murmur_snr_db: f64,
    pub background_snr_db: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_patients: 64,
            recordings_per_patient: 1,
            duration_s: 6.0,
            heart_rate_bpm_range: (60.0, 110.0),
            murmur_prevalence: 0.4,
            murmur_band_hz: (150.0, 450.0),
            murmur_snr_db: 0.0,
            background_snr_db: 15.0,
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let (hlo, hhi) = self.heart_rate_bpm_range;
        let (blo, bhi) = self.murmur_band_hz;
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        if self.n_patients == 0 || self.recordings_per_patient == 0 {
            return invalid("synth_corpus", "need at least one patient and one recording");
        }
        if !(self.duration_s >= 1.0) {
            return invalid("synth_corpus", "duration_s must be at least 1 s");
        }
        if !(hlo > 0.0 && hlo <= hhi) {
            return invalid("synth_corpus", "heart_rate_bpm_range must be positive and ordered");
        }
        if !(0.0..=1.0).contains(&self.murmur_prevalence) {
            return invalid("synth_corpus", "murmur_prevalence outside [0, 1]");
        }
        if !(blo >= 0.0 && blo < bhi && bhi <= nyquist) {
            return invalid("synth_corpus", "murmur_band_hz must be ordered and below Nyquist");
        }
        if !self.murmur_snr_db.is_finite() || !self.background_snr_db.is_finite() {
            return invalid("synth_corpus", "SNRs must be finite");
        }
        Ok(())
    }
}

const S1_HZ: f64 = 40.0;
const S1_DUR: f64 = 0.080;
const S2_HZ: f64 = 60.0;
const S2_DUR: f64 = 0.060;
const S2_PHASE: f64 = 0.35;

fn add_burst(x: &mut [f64], start_s: f64, dur_s: f64, freq: f64, amp: f64, phase: f64) {
    let fs = SAMPLE_RATE as f64;
    let i0 = (start_s * fs).round() as isize;
    let n = (dur_s * fs).round() as isize;
    let sigma = dur_s / 6.0;
    for k in 0..n {
        let i = i0 + k;
        if i < 0 || i as usize >= x.len() {
            continue;
        }
        let t = k as f64 / fs;
        let env = (-0.5 * ((t - dur_s / 2.0) / sigma).powi(2)).exp();
        x[i as usize] += amp * env * (2.0 * PI * freq * t + phase).sin();
    }
}

fn band_noise(n: usize, fs: f64, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    signal::fft(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * fs / n as f64;
        if f < lo || f > hi {
            *c = Complex::new(0.0, 0.0);
        }
    }
    signal::ifft(&mut buf);
    buf.into_iter().map(|c| c.re).collect()
}

fn scale_to_power(x: &mut [f64], target: f64) {
    let p = x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64;
    if p > 0.0 {
        let s = (target / p).sqrt();
        x.iter_mut().for_each(|v| *v *= s);
    }
}

fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Deterministic synthetic phonocardiogram corpus. Each patient draws its
/// label and heart rate once; each recording draws its own noise from an
/// independent substream, so generation order does not matter.
pub fn synth_corpus(spec: &SynthSpec) -> Result<(Manifest, Vec<Recording>)> {
    spec.validate()?;
    let fs = SAMPLE_RATE as f64;
    let n = (spec.duration_s * fs).round() as usize;
    let sites = [Site::Av, Site::Mv, Site::Pv, Site::Tv];
    let mut metas = Vec::new();
    let mut recs = Vec::new();
    for p in 0..spec.n_patients {
        let mut prng = substream(spec.seed, (p as u64) << 16);
        let label = u8::from(prng.random::<f64>() < spec.murmur_prevalence);
        let (hlo, hhi) = spec.heart_rate_bpm_range;
        let hr = if hhi > hlo {
            prng.random_range(hlo..=hhi)
        } else {
            hlo
        };
        let rr = 60.0 / hr;
        let patient_id = format!("P{p:04}");
        for r in 0..spec.recordings_per_patient {
            let mut rng = substream(spec.seed, ((p as u64) << 16) | (r as u64 + 1));
            let recording_id = format!("{patient_id}_R{r:02}");
            let offset = rng.random_range(0.0..rr);
            let a1 = rng.random_range(0.8..1.2);
            let a2 = rng.random_range(0.5..0.8);
            let mut heart = vec![0.0; n];
            let mut gate = vec![0.0; n];
            let mut intervals = Vec::new();
            let mut t = offset;
            while t < spec.duration_s {
                add_burst(&mut heart, t, S1_DUR, S1_HZ, a1, rng.random_range(0.0..2.0 * PI));
                let s2 = t + S2_PHASE * rr;
                add_burst(&mut heart, s2, S2_DUR, S2_HZ, a2, rng.random_range(0.0..2.0 * PI));
                // Raised-cosine gate over systole (S1 end .. S2 start).
                let (g0, g1) = ((t + S1_DUR) * fs, s2 * fs);
                let ramp = 0.01 * fs;
                let lo = g0.floor().max(0.0) as usize;
                let hi = (g1.ceil() as usize).min(n);
                for (i, gv) in gate.iter_mut().enumerate().take(hi).skip(lo) {
                    let x = i as f64;
                    let up = ((x - g0) / ramp).clamp(0.0, 1.0);
                    let down = ((g1 - x) / ramp).clamp(0.0, 1.0);
                    *gv = 0.25 * (1.0 - (PI * up).cos()) * (1.0 - (PI * down).cos());
                }
                let end = s2 + S2_DUR;
                if end <= spec.duration_s {
                    intervals.push(Interval {
                        start_s: (t * 1000.0).round() / 1000.0,
                        end_s: (end * 1000.0).round() / 1000.0,
                    });
                }
                t += rr;
            }
            let p_heart = heart.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let mut x = heart;
            if label == 1 {
                let (lo, hi) = spec.murmur_band_hz;
                let mut m = band_noise(n, fs, lo, hi, &mut rng);
                m.iter_mut().zip(&gate).for_each(|(v, g)| *v *= g);
                scale_to_power(&mut m, p_heart / 10f64.powf(spec.murmur_snr_db / 10.0));
                x.iter_mut().zip(&m).for_each(|(a, b)| *a += b);
            }
            let mut bg: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            scale_to_power(&mut bg, p_heart / 10f64.powf(spec.background_snr_db / 10.0));
            x.iter_mut().zip(&bg).for_each(|(a, b)| *a += b);
            let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let gain = if peak > 0.0 { 0.9 / peak } else { 1.0 };
            let samples: Vec<f32> = x.iter().map(|v| (v * gain) as f32).collect();
            let meta = RecordingMeta {
                recording_id: recording_id.clone(),
                patient_id: patient_id.clone(),
                path: PathBuf::from(format!("wav/{recording_id}.wav")),
                label,
                site: sites[r % sites.len()],
                sample_rate_hz: SAMPLE_RATE,
                murmur_intervals: if label == 1 { intervals } else { Vec::new() },
            };
            metas.push(meta.clone());
            recs.push(Recording { meta, samples });
        }
    }
    Ok((Manifest::new(metas)?, recs))
}

/// Writes `manifest.jsonl` and one float32 WAV per recording under `dir`.
pub fn write_corpus(dir: &Path, manifest: &Manifest, recordings: &[Recording]) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("wav")).map_err(io_err(dir))?;
    for r in recordings {
        write_wav_f32(&dir.join(&r.meta.path), &r.samples, SAMPLE_RATE)?;
    }
    let path = dir.join("manifest.jsonl");
    manifest.save(&path)?;
    Ok(path)
}

pub fn read_all(manifest: &Manifest) -> Result<Vec<Recording>> {
    manifest.entries.iter().map(read_recording).collect()
}
