use auscult_core::stats::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pair_count_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &yi) in labels.iter().enumerate() {
        for (j, &yj) in labels.iter().enumerate() {
            if yi == 1 && yj == 0 {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

#[test]
fn auroc_hand_case() {
    let s = [0.9, 0.4, 0.5, 0.1];
    let y = [1, 1, 0, 0];
    assert_eq!(auroc(&s, &y).unwrap(), 0.75);
}

#[test]
fn auroc_rejects_single_class() {
    assert!(auroc(&[0.1, 0.2], &[1, 1]).is_err());
    assert!(evaluate_scores(&[0.1, 0.2], &[0, 0], &["a".into(), "b".into()], 0.5).is_err());
}

#[test]
fn brier_and_ece_of_perfect_forecasts() {
    let y = [1, 0, 1, 0, 0];
    let p: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    assert_eq!(brier(&p, &y), 0.0);
    assert_eq!(calibration(&p, &y, ECE_BINS).0, 0.0);
}

#[test]
fn ece_two_samples_at_point_eight() {
    let (ece, bins) = calibration(&[0.8, 0.8], &[1, 0], ECE_BINS);
    assert!((ece - 0.3).abs() < 1e-12, "{ece}");
    assert_eq!(bins.iter().filter(|b| b.count > 0).count(), 1);
}

#[test]
fn reliability_bins_partition_unit_interval() {
    let (_, bins) = calibration(&[0.0, 1.0, 0.5, 0.9999], &[0, 1, 1, 0], ECE_BINS);
    assert_eq!(bins.len(), ECE_BINS);
    assert_eq!(bins[0].lo, 0.0);
    assert_eq!(bins[ECE_BINS - 1].hi, 1.0);
    for w in bins.windows(2) {
        assert_eq!(w[0].hi, w[1].lo);
    }
    assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 4);
    assert_eq!(bins[ECE_BINS - 1].count, 2);
}

#[test]
fn mcnemar_hand_cases() {
    let mk = |b: usize, c: usize, agree: usize| {
        let mut a = Vec::new();
        let mut bb = Vec::new();
        a.extend(std::iter::repeat_n(true, b));
        bb.extend(std::iter::repeat_n(false, b));
        a.extend(std::iter::repeat_n(false, c));
        bb.extend(std::iter::repeat_n(true, c));
        a.extend(std::iter::repeat_n(true, agree));
        bb.extend(std::iter::repeat_n(true, agree));
        mcnemar_test(&a, &bb)
    };
    let r = mk(10, 2, 7);
    assert_eq!((r.b, r.c), (10, 2));
    let exact = 2.0 * (1.0 + 12.0 + 66.0) / 4096.0;
    assert!((r.p_exact - exact).abs() < 1e-12);
    assert!((r.p_exact - 0.03857).abs() < 1e-4);
    assert_eq!(mk(4, 4, 3).p_exact, 1.0);
    assert_eq!(mk(0, 0, 5).p_exact, 1.0);
}

#[test]
fn delong_self_and_antisymmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let y: Vec<u8> = (0..60).map(|i| u8::from(i % 3 == 0)).collect();
    let a: Vec<f64> = y.iter().map(|&v| v as f64 * 0.6 + rng.random::<f64>()).collect();
    let b: Vec<f64> = y.iter().map(|&v| v as f64 * 0.3 + rng.random::<f64>()).collect();
    let s = delong_test(&a, &a, &y).unwrap();
    assert_eq!((s.delta_auc, s.p), (0.0, 1.0));
    let ab = delong_test(&a, &b, &y).unwrap();
    let ba = delong_test(&b, &a, &y).unwrap();
    assert_eq!(ab.delta_auc, -ba.delta_auc);
    assert!((ab.p - ba.p).abs() < 1e-12);
    assert!((0.0..=1.0).contains(&ab.p));
}

#[test]
fn delong_agrees_with_patient_bootstrap() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 300;
    let y: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<f64>() < 0.4)).collect();
    let patients: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
    let base: Vec<f64> = y.iter().map(|&v| v as f64 * 0.8 + rng.random::<f64>()).collect();
    let a: Vec<f64> = base.iter().map(|&s| s + 0.3 * rng.random::<f64>()).collect();
    let b: Vec<f64> = base.iter().zip(&y).map(|(&s, &v)| s - 0.25 * v as f64 + 0.3 * rng.random::<f64>()).collect();
    let d = delong_test(&a, &b, &y).unwrap();
    let boot = bootstrap_paired(&a, &b, &y, &patients, 2000, 5, auroc).unwrap();
    assert!((d.delta_auc - boot.delta).abs() < 1e-12);
    assert!((d.p - boot.p).abs() < 0.05, "delong {} bootstrap {}", d.p, boot.p);
}

#[test]
fn bootstrap_identical_models() {
    let y: Vec<u8> = (0..40).map(|i| u8::from(i % 4 == 0)).collect();
    let s: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 / 11.0).collect();
    let p: Vec<String> = (0..40).map(|i| format!("p{}", i / 2)).collect();
    let r = bootstrap_auprc(&s, &s, &y, &p, 500, 1).unwrap();
    assert!(r.ci_low <= 0.0 && 0.0 <= r.ci_high);
    assert_eq!(r.p, 1.0);
}

fn separated_scenario(seed: u64) -> (Vec<f64>, Vec<f64>, Vec<u8>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_pat = 60;
    let (mut a, mut b, mut y, mut p) = (vec![], vec![], vec![], vec![]);
    for pi in 0..n_pat {
        let label = u8::from(pi % 3 == 0);
        for _ in 0..3 {
            let noise: f64 = rng.random();
            a.push(label as f64 * 0.5 + noise);
            b.push(label as f64 * 0.35 + noise * 0.9 + 0.1 * rng.random::<f64>());
            y.push(label);
            p.push(format!("P{pi}"));
        }
    }
    (a, b, y, p)
}

#[test]
fn bootstrap_ci_contains_estimate_and_p_is_stable() {
    let (a, b, y, p) = separated_scenario(2);
    let r1 = bootstrap_auprc(&a, &b, &y, &p, 2000, 100).unwrap();
    let r2 = bootstrap_auprc(&a, &b, &y, &p, 2000, 200).unwrap();
    for r in [&r1, &r2] {
        assert!(r.ci_low <= r.delta && r.delta <= r.ci_high, "{r:?}");
        assert!((0.0..=1.0).contains(&r.p));
        assert_eq!(r.n_resamples, 2000);
    }
    assert!((r1.p - r2.p).abs() <= 0.02, "{} vs {}", r1.p, r2.p);
}

#[test]
fn bootstrap_counts_single_class_redraws() {
    // One positive patient among five: many resamples miss it.
    let y = [1, 0, 0, 0, 0];
    let s = [0.9, 0.1, 0.2, 0.3, 0.4];
    let p: Vec<String> = (0..5).map(|i| format!("p{i}")).collect();
    let r = bootstrap_auprc(&s, &s, &y, &p, 200, 9).unwrap();
    assert!(r.redraws > 0);
}

#[test]
fn auprc_step_integration_hand_case() {
    // Ranked: 1 (P=1,R=.5), 0, 1 (P=2/3,R=1), 0.
    let s = [0.9, 0.8, 0.7, 0.6];
    let y = [1, 0, 1, 0];
    let ap = auprc(&s, &y).unwrap();
    assert!((ap - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
}

#[test]
fn max_f1_threshold_is_midpoint() {
    let s = [0.9, 0.8, 0.3, 0.2];
    let y = [1, 1, 0, 0];
    let t = max_f1_threshold(&s, &y).unwrap();
    assert!((t - 0.55).abs() < 1e-12);
    assert_eq!(f1_at(&s, &y, t), 1.0);
}

#[test]
fn evaluate_report_fields() {
    let s = [0.9, 0.4, 0.5, 0.1];
    let y = [1, 1, 0, 0];
    let p: Vec<String> = ["a", "a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let r = evaluate_scores(&s, &y, &p, 0.45).unwrap();
    assert_eq!(r.n_patients, 3);
    assert_eq!(r.n_windows, 4);
    assert_eq!(r.auroc, 0.75);
    assert_eq!(r.calibration.bins.iter().map(|b| b.count).sum::<usize>(), 4);
    for m in [r.accuracy, r.precision, r.recall, r.f1, r.auroc, r.auprc, r.calibration.ece, r.calibration.brier] {
        assert!((0.0..=1.0).contains(&m));
    }
}

proptest! {
    #[test]
    fn auroc_matches_pair_counting(
        data in prop::collection::vec((0u8..6, 0u8..2), 2..40)
    ) {
        let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 5.0).collect();
        let mut labels: Vec<u8> = data.iter().map(|d| d.1).collect();
        labels[0] = 1;
        labels[1] = 0;
        let got = auroc(&scores, &labels).unwrap();
        prop_assert!((got - pair_count_auc(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn delong_self_comparison_is_one(
        data in prop::collection::vec((0.0f64..1.0, 0u8..2), 3..40)
    ) {
        let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
        let mut labels: Vec<u8> = data.iter().map(|d| d.1).collect();
        labels[0] = 1;
        labels[1] = 0;
        prop_assert_eq!(delong_test(&scores, &scores, &labels).unwrap().p, 1.0);
    }

    #[test]
    fn ece_and_brier_in_unit_interval(
        data in prop::collection::vec((0.0f64..=1.0, 0u8..2), 1..60)
    ) {
        let p: Vec<f64> = data.iter().map(|d| d.0).collect();
        let y: Vec<u8> = data.iter().map(|d| d.1).collect();
        let (ece, bins) = calibration(&p, &y, ECE_BINS);
        prop_assert!((0.0..=1.0).contains(&ece));
        prop_assert!((0.0..=1.0).contains(&brier(&p, &y)));
        prop_assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), p.len());
    }
}
