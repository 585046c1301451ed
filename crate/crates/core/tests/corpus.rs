use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use auscult_core::corpus::*;
use auscult_core::Error;
use proptest::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

fn meta(id: &str, path: PathBuf, rate: u32) -> RecordingMeta {
    RecordingMeta {
        recording_id: id.into(),
        patient_id: "P1".into(),
        path,
        label: 0,
        site: Site::Av,
        sample_rate_hz: rate,
        murmur_intervals: vec![],
    }
}

fn write_lines(dir: &Path, lines: &[&str]) -> PathBuf {
    let p = dir.join("m.jsonl");
    fs::write(&p, lines.join("\n")).unwrap();
    p
}

const LINE_A: &str = r#"{"recording_id":"a","patient_id":"p1","path":"a.wav","label":0,"site":"AV","sample_rate_hz":4000}"#;
const LINE_B: &str = r#"{"recording_id":"b","patient_id":"p1","path":"b.wav","label":1,"site":"MV","sample_rate_hz":4000,"murmur_intervals":[{"start_s":0.5,"end_s":1.0}]}"#;
const LINE_C: &str = r#"{"recording_id":"c","patient_id":"p2","path":"/abs/c.wav","label":0,"site":"OTHER","sample_rate_hz":2000}"#;

#[test]
fn three_line_manifest_parses() {
    let dir = tempfile::tempdir().unwrap();
    let m = load_manifest(&write_lines(dir.path(), &[LINE_A, LINE_B, LINE_C])).unwrap();
    assert_eq!(m.entries.len(), 3);
    assert_eq!(m.schema_version, MANIFEST_SCHEMA_VERSION);
    assert_eq!(m.entries[0].path, dir.path().join("a.wav"));
    assert_eq!(m.entries[2].path, PathBuf::from("/abs/c.wav"));
    assert_eq!(m.entries[1].murmur_intervals, vec![Interval { start_s: 0.5, end_s: 1.0 }]);
    assert_eq!(m.patients(), vec!["p1".to_string(), "p2".to_string()]);
}

#[test]
fn duplicate_id_is_named() {
    let dir = tempfile::tempdir().unwrap();
    match load_manifest(&write_lines(dir.path(), &[LINE_A, LINE_A])) {
        Err(Error::DuplicateId(id)) => assert_eq!(id, "a"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn reversed_interval_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bad = LINE_B.replace(r#""start_s":0.5,"end_s":1.0"#, r#""start_s":1.0,"end_s":0.5"#);
    assert!(matches!(
        load_manifest(&write_lines(dir.path(), &[&bad])),
        Err(Error::IntervalOrder { .. })
    ));
}

#[test]
fn malformed_line_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    match load_manifest(&write_lines(dir.path(), &[LINE_A, "{not json", LINE_C])) {
        Err(Error::ManifestLine { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
}

#[test]
fn unknown_label_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bad = LINE_A.replace(r#""label":0"#, r#""label":2"#);
    assert!(matches!(
        load_manifest(&write_lines(dir.path(), &[&bad])),
        Err(Error::UnknownLabel { label: 2, .. })
    ));
}

#[test]
fn save_then_load_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let m = load_manifest(&write_lines(dir.path(), &[LINE_A, LINE_B, LINE_C])).unwrap();
    let out = dir.path().join("again.jsonl");
    m.save(&out).unwrap();
    assert_eq!(load_manifest(&out).unwrap(), m);
}

#[test]
fn pcm16_two_seconds_gives_8000_samples() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.wav");
    let x: Vec<f32> = (0..8000).map(|i| (i as f32 * 0.01).sin()).collect();
    write_wav_pcm16(&p, &x, 4000).unwrap();
    let r = read_recording(&meta("x", p, 4000)).unwrap();
    assert_eq!(r.samples.len(), 8000);
    assert!(r.samples.iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!((r.duration_s() - 2.0).abs() < 1e-12);
}

#[test]
fn float_wav_is_read_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.wav");
    let x = vec![0.25f32, -0.5, 0.125, 0.0];
    write_wav_f32(&p, &x, 4000).unwrap();
    assert_eq!(read_recording(&meta("x", p, 4000)).unwrap().samples, x);
}

#[test]
fn one_second_at_2000_hz_becomes_4000_samples() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.wav");
    write_wav_f32(&p, &vec![0.1; 2000], 2000).unwrap();
    let r = read_recording(&meta("x", p, 2000)).unwrap();
    assert_eq!(r.samples.len(), 4000);
    assert_eq!(r.meta.sample_rate_hz, 4000);
}

fn dft_argmax_hz(x: &[f32], fs: f64) -> f64 {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    let k = (1..buf.len() / 2).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap();
    k as f64 * fs / buf.len() as f64
}

#[test]
fn tone_survives_downsampling() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.wav");
    let x: Vec<f32> = (0..8000).map(|i| (2.0 * PI * 100.0 * i as f64 / 8000.0).sin() as f32 * 0.5).collect();
    write_wav_f32(&p, &x, 8000).unwrap();
    let r = read_recording(&meta("x", p, 8000)).unwrap();
    assert_eq!(r.samples.len(), 4000);
    assert_eq!(dft_argmax_hz(&r.samples, 4000.0), 100.0);
}

#[test]
fn stereo_and_empty_audio_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let stereo = dir.path().join("s.wav");
    let spec = hound::WavSpec {
        channels: 2,
        sample_rate: 4000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
    for _ in 0..8 {
        w.write_sample(0i16).unwrap();
    }
    w.finalize().unwrap();
    assert!(matches!(read_recording(&meta("s", stereo, 4000)), Err(Error::Audio { .. })));

    let empty = dir.path().join("e.wav");
    write_wav_f32(&empty, &[], 4000).unwrap();
    assert!(matches!(read_recording(&meta("e", empty, 4000)), Err(Error::Audio { .. })));

    let missing = dir.path().join("nope.wav");
    assert!(read_recording(&meta("n", missing, 4000)).is_err());
}

#[test]
fn zscore_examples() {
    assert_eq!(zscore(&[1.0, -1.0]).unwrap(), vec![1.0, -1.0]);
    assert_eq!(zscore(&[5.0; 4]).unwrap(), vec![0.0; 4]);
    assert!(zscore(&[3.0]).is_err());
}

/// Two-pass mean and population variance in f64.
fn two_pass(x: &[f32]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let v = x.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
    (m, v)
}

proptest! {
    #[test]
    fn zscore_standardizes(x in prop::collection::vec(-100.0f32..100.0, 2..300)) {
        let (_, v0) = two_pass(&x);
        prop_assume!(v0.sqrt() > 1e-3);
        let z = zscore(&x).unwrap();
        let (m, v) = two_pass(&z);
        prop_assert!(m.abs() < 1e-6);
        prop_assert!((v - 1.0).abs() < 1e-5);
    }

    #[test]
    fn zscore_idempotent(x in prop::collection::vec(-100.0f32..100.0, 2..300)) {
        let (_, v0) = two_pass(&x);
        prop_assume!(v0.sqrt() > 1e-3);
        let z = zscore(&x).unwrap();
        let zz = zscore(&z).unwrap();
        for (a, b) in z.iter().zip(&zz) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }
}

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        n_patients: 6,
        recordings_per_patient: 2,
        duration_s: 3.0,
        seed,
        ..SynthSpec::default()
    }
}

#[test]
fn synth_is_deterministic() {
    let (m1, r1) = synth_corpus(&small_spec(9)).unwrap();
    let (m2, r2) = synth_corpus(&small_spec(9)).unwrap();
    assert_eq!(m1, m2);
    for (a, b) in r1.iter().zip(&r2) {
        let ab: Vec<u32> = a.samples.iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u32> = b.samples.iter().map(|v| v.to_bits()).collect();
        assert_eq!(ab, bb);
    }
    let (_, r3) = synth_corpus(&small_spec(10)).unwrap();
    assert_ne!(r1[0].samples, r3[0].samples);
}

#[test]
fn synth_output_is_canonical() {
    let (m, recs) = synth_corpus(&small_spec(1)).unwrap();
    assert_eq!(m.entries.len(), 12);
    for r in &recs {
        assert_eq!(r.meta.sample_rate_hz, 4000);
        assert_eq!(r.samples.len(), 12000);
        assert!(r.samples.iter().all(|v| v.is_finite()));
        for iv in &r.meta.murmur_intervals {
            assert!(0.0 <= iv.start_s && iv.start_s < iv.end_s && iv.end_s <= 3.0);
        }
        assert_eq!(r.meta.label == 1, !r.meta.murmur_intervals.is_empty());
    }
}

#[test]
fn zero_prevalence_gives_all_negative() {
    let spec = SynthSpec {
        murmur_prevalence: 0.0,
        ..small_spec(3)
    };
    let (m, _) = synth_corpus(&spec).unwrap();
    assert!(m.entries.iter().all(|e| e.label == 0));
}

#[test]
fn invalid_spec_is_rejected() {
    for spec in [
        SynthSpec { heart_rate_bpm_range: (100.0, 60.0), ..small_spec(0) },
        SynthSpec { murmur_band_hz: (500.0, 100.0), ..small_spec(0) },
        SynthSpec { murmur_prevalence: -0.1, ..small_spec(0) },
        SynthSpec { n_patients: 0, ..small_spec(0) },
    ] {
        assert!(synth_corpus(&spec).is_err());
    }
}

/// Power in [lo, hi] Hz summed over the annotated systolic spans, via a
/// separate DFT of each span.
fn systolic_band_power(r: &Recording, spans: &[Interval], lo: f64, hi: f64) -> f64 {
    let fs = 4000.0;
    let mut total = 0.0;
    for iv in spans {
        let a = (iv.start_s * fs) as usize;
        let b = ((iv.end_s * fs) as usize).min(r.samples.len());
        let seg = &r.samples[a..b];
        let mut buf: Vec<Complex<f64>> = seg.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
        let n = buf.len();
        for (k, c) in buf.iter().enumerate().take(n / 2 + 1) {
            let f = k as f64 * fs / n as f64;
            if (lo..=hi).contains(&f) {
                total += c.norm_sqr() / n as f64;
            }
        }
    }
    total
}

#[test]
fn murmur_raises_systolic_band_power() {
    let spec = SynthSpec {
        n_patients: 40,
        duration_s: 4.0,
        ..SynthSpec::default()
    };
    let (_, recs) = synth_corpus(&spec).unwrap();
    let pos: Vec<&Recording> = recs.iter().filter(|r| r.meta.label == 1).collect();
    let neg: Vec<&Recording> = recs.iter().filter(|r| r.meta.label == 0).collect();
    assert!(!pos.is_empty() && !neg.is_empty());
    let (lo, hi) = spec.murmur_band_hz;
    let mut wins = 0;
    for (p, n) in pos.iter().zip(&neg) {
        // Same spans on both recordings so only the content differs.
        let spans = &p.meta.murmur_intervals;
        if systolic_band_power(p, spans, lo, hi) > systolic_band_power(n, spans, lo, hi) {
            wins += 1;
        }
    }
    assert_eq!(wins, pos.len().min(neg.len()));
}

#[test]
fn prevalence_within_three_standard_errors() {
    let spec = SynthSpec {
        n_patients: 1200,
        duration_s: 1.0,
        murmur_prevalence: 0.3,
        ..SynthSpec::default()
    };
    let (m, _) = synth_corpus(&spec).unwrap();
    let n = m.entries.len() as f64;
    let p_hat = m.entries.iter().filter(|e| e.label == 1).count() as f64 / n;
    let se = (0.3 * 0.7 / n).sqrt();
    assert!((p_hat - 0.3).abs() <= 3.0 * se, "p_hat {p_hat}");
}

#[test]
fn written_corpus_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let (m, recs) = synth_corpus(&small_spec(5)).unwrap();
    let path = write_corpus(dir.path(), &m, &recs).unwrap();
    let loaded = load_manifest(&path).unwrap();
    let back = read_all(&loaded).unwrap();
    for (a, b) in recs.iter().zip(&back) {
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.meta.recording_id, b.meta.recording_id);
    }
}
