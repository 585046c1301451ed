use std::f64::consts::PI;

use auscult_core::signal;
use auscult_core::views::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..4000).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn tone(hz: f64) -> Vec<f32> {
    (0..4000).map(|i| (2.0 * PI * hz * i as f64 / 4000.0).sin() as f32).collect()
}

fn recipe(ops: Vec<AugOp>) -> AugmentationRecipe {
    AugmentationRecipe { ops, seed: 11 }
}

#[test]
fn amp_scale_is_exact() {
    let x = noise(1);
    let y = augment_wave(&x, &recipe(vec![AugOp::AmpScale { factor: 1.2 }])).unwrap();
    for (a, b) in x.iter().zip(&y) {
        assert_eq!(*b, (*a as f64 * 1.2) as f32);
    }
}

#[test]
fn time_shift_is_circular() {
    let x = noise(2);
    let y = augment_wave(&x, &recipe(vec![AugOp::TimeShift { ms: 25.0 }])).unwrap();
    let e = |v: &[f32]| v.iter().map(|&s| (s as f64).powi(2)).sum::<f64>();
    assert!((e(&x) - e(&y)).abs() < 1e-9);
    // 25 ms at 4 kHz is 100 samples.
    assert_eq!(y[100], x[0]);
    assert_eq!(y[0], x[3900]);
}

#[test]
fn snr_noise_hits_the_requested_level() {
    for seed in 0..5 {
        let x = noise(seed);
        let y = augment_wave(&x, &AugmentationRecipe { ops: vec![AugOp::SnrNoise { db: 25.0 }], seed }).unwrap();
        let ps: f64 = x.iter().map(|&v| (v as f64).powi(2)).sum();
        let pn: f64 = x.iter().zip(&y).map(|(&a, &b)| (b as f64 - a as f64).powi(2)).sum();
        let snr = 10.0 * (ps / pn).log10();
        assert!((snr - 25.0).abs() < 0.1, "{snr}");
    }
}

#[test]
fn out_of_range_parameters_are_rejected() {
    let x = noise(3);
    for op in [
        AugOp::GaussNoise { sigma: 0.02 },
        AugOp::TimeShift { ms: 150.0 },
        AugOp::PitchShift { semitones: 2.5 },
        AugOp::AmpScale { factor: 1.5 },
        AugOp::SnrNoise { db: 10.0 },
        AugOp::Bandpass { lo_hz: 5.0, hi_hz: 500.0 },
    ] {
        assert!(augment_wave(&x, &recipe(vec![op])).is_err(), "{op:?}");
    }
}

#[test]
fn pitch_shift_moves_a_tone() {
    let y = augment_wave(&tone(200.0), &recipe(vec![AugOp::PitchShift { semitones: 2.0 }])).unwrap();
    assert_eq!(y.len(), 4000);
    // Only the first 1/ratio of the output carries the resampled tone.
    let head = &y[..3500];
    let f = signal::dominant_frequency(head, 4000.0);
    let want = 200.0 * 2f64.powf(2.0 / 12.0);
    assert!((f - want).abs() < 4000.0 / 3500.0 + 1.0, "{f} vs {want}");
}

#[test]
fn bandpass_attenuates_out_of_band() {
    let x = tone(1500.0);
    let y = augment_wave(&x, &recipe(vec![AugOp::Bandpass { lo_hz: 20.0, hi_hz: 500.0 }])).unwrap();
    assert!(signal::power(&y) < 0.2 * signal::power(&x));
}

#[test]
fn logmel_shape_is_fixed() {
    for x in [noise(4), tone(300.0), vec![0.0; 4000]] {
        let s = logmel(&x);
        assert_eq!((s.n_mels, s.n_frames, s.bins.len()), (64, 59, 64 * 59));
        assert!(s.bins.iter().all(|v| v.is_finite()));
    }
    assert_eq!(n_frames(4000), (4000 - 256) / 64 + 1);
}

#[test]
fn logmel_of_silence_is_all_zero() {
    assert!(logmel(&vec![0.0; 4000]).bins.iter().all(|&v| v == 0.0));
}

#[test]
fn logmel_peaks_at_the_nearest_filter() {
    let s = logmel(&tone(100.0));
    let avg: Vec<f64> = (0..s.n_mels)
        .map(|m| (0..s.n_frames).map(|t| s.at(m, t) as f64).sum::<f64>() / s.n_frames as f64)
        .collect();
    let arg = (0..avg.len()).max_by(|&a, &b| avg[a].total_cmp(&avg[b])).unwrap();
    // Centres placed evenly on the mel scale between the band edges.
    let lo = 2595.0 * (1.0 + 25.0 / 700.0f64).log10();
    let hi = 2595.0 * (1.0 + 2000.0 / 700.0f64).log10();
    let centers: Vec<f64> = (1..=64)
        .map(|k| {
            let m = lo + (hi - lo) * k as f64 / 65.0;
            700.0 * (10f64.powf(m / 2595.0) - 1.0)
        })
        .collect();
    let nearest = (0..64)
        .min_by(|&a, &b| (centers[a] - 100.0).abs().total_cmp(&(centers[b] - 100.0).abs()))
        .unwrap();
    assert_eq!(arg, nearest);
    for (a, b) in centers.iter().zip(mel_centers()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn no_masks_is_identity() {
    let s = logmel(&noise(5));
    assert_eq!(augment_spec(&s, 0, 0, 8, 1).unwrap(), s);
}

#[test]
fn one_time_mask_of_width_five() {
    let s = logmel(&noise(6));
    let mut m = s.clone();
    apply_time_mask(&mut m, 10, 5);
    let mut changed = Vec::new();
    for t in 0..s.n_frames {
        let col_masked = (0..s.n_mels).all(|f| m.at(f, t) == MASK_VALUE);
        let col_same = (0..s.n_mels).all(|f| m.at(f, t) == s.at(f, t));
        assert!(col_masked || col_same);
        if !col_same {
            changed.push(t);
        }
    }
    assert_eq!(changed, vec![10, 11, 12, 13, 14]);
}

#[test]
fn masks_are_seeded_and_bounded() {
    let s = logmel(&noise(7));
    let a = augment_spec(&s, 2, 2, 8, 99).unwrap();
    assert_eq!(a, augment_spec(&s, 2, 2, 8, 99).unwrap());
    assert_ne!(a, augment_spec(&s, 2, 2, 8, 100).unwrap());
    assert!(augment_spec(&s, 1, 0, 0, 1).is_err());
    assert!(augment_spec(&s, 1, 0, 60, 1).is_err());
    assert!(augment_spec(&s, 0, 1, 65, 1).is_err());
}

#[test]
fn two_views_differ_and_stay_finite() {
    let x = noise(8);
    let masks = MaskConfig::default();
    let a = make_view(&x, &masks, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = make_view(&x, &masks, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert!(a.wave != b.wave || a.spec != b.spec);
    for v in [&a, &b] {
        assert_eq!(v.wave.len(), 4000);
        assert!(v.wave.iter().chain(&v.spec.bins).all(|x| x.is_finite()));
    }
}

proptest! {
    #[test]
    fn empty_recipe_is_identity(seed in 0u64..1000) {
        let x = noise(seed);
        prop_assert_eq!(augment_wave(&x, &AugmentationRecipe { ops: vec![], seed }).unwrap(), x);
    }

    #[test]
    fn sampled_recipes_are_valid_and_preserve_length(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = sample_recipe(&mut rng);
        for op in &r.ops {
            prop_assert!(op.validate().is_ok());
        }
        let y = augment_wave(&noise(seed), &r).unwrap();
        prop_assert_eq!(y.len(), 4000);
        prop_assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mask_widths_stay_within_bounds(seed in 0u64..1000, w in 1usize..20) {
        let s = logmel(&noise(seed % 7));
        let m = augment_spec(&s, 1, 0, w, seed).unwrap();
        let masked: Vec<usize> = (0..s.n_frames)
            .filter(|&t| (0..s.n_mels).any(|f| m.at(f, t) != s.at(f, t)))
            .collect();
        prop_assert!(masked.len() <= w);
        if let (Some(&a), Some(&b)) = (masked.first(), masked.last()) {
            prop_assert_eq!(b - a + 1, masked.len());
        }
    }
}
