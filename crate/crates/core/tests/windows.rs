use std::collections::BTreeSet;

use auscult_core::corpus::{Interval, Manifest, Recording, RecordingMeta, Site};
use auscult_core::windows::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn recording(id: &str, label: u8, dur_s: f64, intervals: &[(f64, f64)]) -> Recording {
    let n = (dur_s * 4000.0).round() as usize;
    Recording {
        meta: RecordingMeta {
            recording_id: id.into(),
            patient_id: format!("p-{id}"),
            path: "unused.wav".into(),
            label,
            site: Site::Mv,
            sample_rate_hz: 4000,
            murmur_intervals: intervals.iter().map(|&(start_s, end_s)| Interval { start_s, end_s }).collect(),
        },
        samples: (0..n).map(|i| ((i as f32) * 0.37).sin()).collect(),
    }
}

fn segment(rec: &str, label: u8, start_s: f64, end_s: f64, rng: &mut ChaCha8Rng) -> Segment {
    let n = ((end_s - start_s) * 4000.0).round() as usize;
    Segment {
        recording_id: rec.into(),
        patient_id: format!("p-{rec}"),
        label,
        start_s,
        end_s,
        samples: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

#[test]
fn positive_intervals_map_to_segments() {
    let ex = extract_segments(&recording("r", 1, 3.0, &[(0.5, 1.0), (2.0, 2.4)]));
    assert_eq!(ex.warnings, 0);
    let lens: Vec<usize> = ex.segments.iter().map(|s| s.samples.len()).collect();
    assert_eq!(lens, vec![2000, 1600]);
    assert!(ex.segments.iter().all(|s| s.label == 1));
}

#[test]
fn negative_recording_is_tiled() {
    let ex = extract_segments(&recording("r", 0, 3.0, &[]));
    assert_eq!(ex.segments.len(), 3);
    let covered: usize = ex.segments.iter().map(|s| s.samples.len()).sum();
    assert_eq!(covered, 12000);
    assert!(ex.segments.iter().all(|s| (s.duration_s() - 1.0).abs() < 1e-9));
}

#[test]
fn out_of_bounds_interval_is_skipped_with_warning() {
    let ex = extract_segments(&recording("r", 1, 3.0, &[(2.9, 3.5)]));
    assert_eq!(ex.warnings, 1);
    assert!(ex.segments.is_empty());
}

#[test]
fn short_intervals_are_dropped_and_long_ones_split() {
    let ex = extract_segments(&recording("r", 1, 10.0, &[(0.0, 0.1), (1.0, 8.0)]));
    let durs: Vec<f64> = ex.segments.iter().map(|s| s.duration_s()).collect();
    assert_eq!(durs.len(), 3);
    assert!(durs.iter().all(|d| (0.2..=3.2).contains(d)));
    assert!((durs.iter().sum::<f64>() - 7.0).abs() < 1e-9);
}

#[test]
fn two_segments_with_short_gap_join() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let segs = vec![segment("r", 1, 0.0, 0.6, &mut rng), segment("r", 1, 0.7, 1.2, &mut rng)];
    let w = build_windows(&segs, 72.0);
    assert_eq!(w.len(), 1);
    assert_eq!(w[0].samples.len(), 4000);
    assert_eq!(w[0].source_segments.len(), 2);
    assert!((w[0].source_segments[1].gap_ms - 100.0).abs() < 1e-6);
    assert!(w[0].quality.rhythm_preserved && w[0].quality.label_pure && w[0].quality.source_unified);
}

#[test]
fn gap_over_one_second_breaks_the_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let segs = vec![segment("r", 1, 0.0, 0.6, &mut rng), segment("r", 1, 1.8, 2.3, &mut rng)];
    // A slow heart rate keeps the cycle rule out of the way.
    assert!(build_windows(&segs, 30.0).is_empty());
}

#[test]
fn single_long_segment_is_truncated() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let segs = vec![segment("r", 0, 0.0, 1.2, &mut rng)];
    let w = build_windows(&segs, 72.0);
    assert_eq!(w.len(), 1);
    let want = auscult_core::corpus::zscore(&segs[0].samples[..4000]).unwrap();
    assert_eq!(w[0].samples, want);
}

#[test]
fn label_or_recording_change_breaks_the_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let segs = vec![segment("r", 1, 0.0, 0.6, &mut rng), segment("r", 0, 0.7, 1.2, &mut rng)];
    assert!(build_windows(&segs, 72.0).is_empty());
    let segs = vec![segment("a", 1, 0.0, 0.6, &mut rng), segment("b", 1, 0.7, 1.2, &mut rng)];
    assert!(build_windows(&segs, 72.0).is_empty());
}

#[test]
fn cycle_rule_tightens_the_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let segs = vec![segment("r", 1, 0.0, 0.6, &mut rng), segment("r", 1, 1.4, 1.9, &mut rng)];
    // 800 ms gap: allowed at 60 bpm (limit 1500 ms), rejected at 120 bpm (750 ms).
    assert_eq!(build_windows(&segs, 60.0).len(), 1);
    assert!(build_windows(&segs, 120.0).is_empty());
}

/// Replays the chaining rules and returns the segment indices per window.
fn oracle_groups(segs: &[Segment], hr: f64) -> Vec<Vec<usize>> {
    let cycle_ms = 1.5 * 60_000.0 / hr;
    let mut out = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut total = 0;
    for (i, s) in segs.iter().enumerate() {
        if let Some(&j) = cur.last() {
            let p = &segs[j];
            let gap = (s.start_s - p.end_s) * 1000.0;
            let joins = p.recording_id == s.recording_id
                && p.label == s.label
                && (50.0..=1000.0).contains(&gap)
                && gap <= cycle_ms;
            if !joins {
                cur.clear();
                total = 0;
            }
        }
        cur.push(i);
        total += s.samples.len();
        if total >= 4000 {
            out.push(std::mem::take(&mut cur));
            total = 0;
        }
    }
    out
}

fn random_segments(rng: &mut ChaCha8Rng) -> Vec<Segment> {
    let mut segs = Vec::new();
    for r in 0..rng.random_range(1..4) {
        let label = rng.random_range(0..2u8);
        let mut t = 0.0;
        for _ in 0..rng.random_range(1..10) {
            t += [0.0, 0.03, 0.1, 0.4, 0.9, 1.2][rng.random_range(0..6)];
            let d = rng.random_range(0.2..1.2f64);
            let d = (d * 4000.0).round() / 4000.0;
            let lab = if rng.random_bool(0.1) { 1 - label } else { label };
            segs.push(segment(&format!("r{r}"), lab, t, t + d, rng));
            t += d;
        }
    }
    segs
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn windows_match_the_replayed_rules(seed in 0u64..u64::MAX, hr in 40.0f64..160.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let segs = random_segments(&mut rng);
        let windows = build_windows(&segs, hr);
        let groups = oracle_groups(&segs, hr);
        prop_assert_eq!(windows.len(), groups.len());
        for (w, g) in windows.iter().zip(&groups) {
            prop_assert_eq!(w.samples.len(), WINDOW_LEN);
            prop_assert_eq!(w.source_segments.len(), g.len());
            for (src, &i) in w.source_segments.iter().zip(g) {
                prop_assert_eq!(src.start_s, segs[i].start_s);
                prop_assert_eq!(&src.recording_id, &w.recording_id);
                prop_assert_eq!(src.label, w.label);
            }
            for src in w.source_segments.iter().skip(1) {
                prop_assert!(src.gap_ms >= 50.0 && src.gap_ms <= 1000.0);
            }
            prop_assert!(w.quality.label_pure && w.quality.source_unified && w.quality.rhythm_preserved);
        }
    }
}

fn manifest_with(labels: &[u8]) -> Manifest {
    let entries = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| RecordingMeta {
            recording_id: format!("r{i}"),
            patient_id: format!("p{i}"),
            path: "x.wav".into(),
            label,
            site: Site::Av,
            sample_rate_hz: 4000,
            murmur_intervals: vec![],
        })
        .collect();
    Manifest::new(entries).unwrap()
}

#[test]
fn ten_patients_split_six_two_two() {
    let m = manifest_with(&[0, 1, 0, 1, 0, 0, 1, 0, 0, 1]);
    let s = split_patients(&m, (0.6, 0.2, 0.2), 42).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
    assert!(s.train.is_disjoint(&s.val) && s.train.is_disjoint(&s.test) && s.val.is_disjoint(&s.test));
    assert_eq!(s, split_patients(&m, (0.6, 0.2, 0.2), 42).unwrap());
}

#[test]
fn too_few_patients_is_an_error() {
    assert!(split_patients(&manifest_with(&[0, 1, 0, 1]), (0.6, 0.2, 0.2), 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn splits_never_leak_and_stay_stratified(
        labels in prop::collection::vec(0u8..2, 5..120),
        seed in 0u64..u64::MAX,
    ) {
        let m = manifest_with(&labels);
        let s = split_patients(&m, (0.6, 0.2, 0.2), seed).unwrap();
        let n = labels.len();
        let all: BTreeSet<String> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), n);
        for (k, (set, r)) in [(&s.train, 0.6), (&s.val, 0.2), (&s.test, 0.2)].into_iter().enumerate() {
            prop_assert!((set.len() as f64 - r * n as f64).abs() <= 1.0);
            let pos = set.iter().filter(|p| labels[p[1..].parse::<usize>().unwrap()] == 1).count();
            prop_assert_eq!(s.prevalence[k], pos as f64 / set.len() as f64);
        }
        // With at least 10 patients per split the ±10 point bound is reachable.
        let global = labels.iter().filter(|&&l| l == 1).count() as f64 / n as f64;
        if n >= 50 {
            for p in s.prevalence {
                prop_assert!((p - global).abs() <= 0.10 + 1e-12);
            }
        }
    }
}

fn labeled_windows(pos: usize, neg: usize) -> Vec<Window> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut segs = Vec::new();
    for i in 0..pos + neg {
        segs.push(segment(&format!("r{i}"), u8::from(i < pos), 0.0, 1.0, &mut rng));
    }
    build_windows(&segs, 72.0)
}

#[test]
fn oversampling_fills_the_gap() {
    let w = labeled_windows(30, 70);
    let plan = oversample_minority(&w, 7).unwrap();
    assert_eq!(plan.len(), 40);
    assert!(plan.iter().all(|e| w[e.window].label == 1));
    assert!(plan.iter().all(|e| !e.recipe.ops.is_empty()));
    assert_eq!(plan, oversample_minority(&w, 7).unwrap());
    assert!(oversample_minority(&labeled_windows(5, 5), 7).unwrap().is_empty());
    assert!(oversample_minority(&labeled_windows(0, 5), 7).is_err());
}

#[test]
fn episode_sizes_follow_the_floor_rule() {
    let batch: Vec<(usize, u8)> = (0..32).map(|i| (i, u8::from(i >= 16))).collect();
    let ep = make_episode(&batch, 5, 3).unwrap();
    let count = |v: &[(usize, u8)], c| v.iter().filter(|x| x.1 == c).count();
    assert_eq!((count(&ep.support, 0), count(&ep.support, 1)), (5, 5));
    assert_eq!((count(&ep.query, 0), count(&ep.query, 1)), (11, 11));
    assert_eq!(ep, make_episode(&batch, 5, 3).unwrap());

    let small = [(0, 0), (1, 0), (2, 1), (3, 1)];
    let ep = make_episode(&small, 5, 3).unwrap();
    assert_eq!((ep.support.len(), ep.query.len()), (2, 2));
    assert!(make_episode(&[(0, 0), (1, 0), (2, 1)], 5, 3).is_err());
}

proptest! {
    #[test]
    fn episodes_partition_the_batch(
        n0 in 2usize..30, n1 in 2usize..30, k in 1usize..10, seed in 0u64..1000,
    ) {
        let batch: Vec<(usize, u8)> = (0..n0 + n1).map(|i| (i, u8::from(i >= n0))).collect();
        let ep = make_episode(&batch, k, seed).unwrap();
        let s: BTreeSet<usize> = ep.support.iter().map(|x| x.0).collect();
        let q: BTreeSet<usize> = ep.query.iter().map(|x| x.0).collect();
        prop_assert!(s.is_disjoint(&q));
        prop_assert_eq!(s.len() + q.len(), n0 + n1);
        for c in [0u8, 1] {
            prop_assert!(ep.support.iter().any(|x| x.1 == c));
        }
    }

    #[test]
    fn contrastive_batches_cover_once(n in 0usize..100, bs in 2usize..40, seed in 0u64..100) {
        let b = contrastive_batches(n, bs, seed);
        let all: Vec<usize> = b.iter().flatten().copied().collect();
        let set: BTreeSet<usize> = all.iter().copied().collect();
        prop_assert_eq!(set.len(), all.len());
        prop_assert!(b.iter().all(|x| x.len() >= 2 && x.len() <= bs));
        prop_assert!(n - all.len() <= 1);
    }
}

#[test]
fn window_set_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let w = labeled_windows(3, 4);
    save_window_set(dir.path(), &w).unwrap();
    assert_eq!(load_window_set(dir.path()).unwrap(), w);
    let bytes = std::fs::metadata(dir.path().join("samples.f32")).unwrap().len();
    assert_eq!(bytes, (7 * WINDOW_LEN * 4) as u64);
}

#[test]
fn heart_rate_estimate_tracks_a_pulse_train() {
    let fs = 4000.0;
    let bpm = 75.0;
    let period = (60.0 / bpm * fs) as usize;
    let x: Vec<f32> = (0..(8.0 * fs) as usize)
        .map(|i| if i % period < 200 { ((i as f32) * 0.3).sin() } else { 0.0 })
        .collect();
    let est = estimate_heart_rate(&x);
    assert!((est - bpm).abs() < 3.0, "{est}");
    assert_eq!(estimate_heart_rate(&vec![0.0; 8000]), FALLBACK_HR_BPM);
}
