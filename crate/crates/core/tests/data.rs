//! Synthetic corpus and augmentation samplers.

use std::collections::BTreeSet;

use mddkit_core::augment::{make_views, AugmentPolicy, FrameMatrix};
use mddkit_core::synth::{generate, split, synthesize_frames, write_features, SynthConfig, SynthVocab};
use mddkit_core::ErrorType;
use mddkit_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn injected_error_rates_match_config() {
    let cfg = SynthConfig {
        num_utts: 1700,
        ..SynthConfig::default()
    };
    let corpus = generate(&cfg, 3).unwrap();
    let mut counts = [0usize; 4];
    let mut total = 0;
    for u in &corpus.utterances {
        for t in u.tags.types() {
            counts[t.index()] += 1;
            total += 1;
        }
        assert_eq!(u.tags.apply(&u.canonical).unwrap(), u.perceived);
    }
    assert!(total >= 10_000, "{total} positions");
    let rate = |t: ErrorType| counts[t.index()] as f64 / total as f64;
    assert!((rate(ErrorType::Substitution) - cfg.sub_rate).abs() <= 0.01);
    assert!((rate(ErrorType::Deletion) - cfg.del_rate).abs() <= 0.01);
    assert!((rate(ErrorType::Insertion) - cfg.ins_rate).abs() <= 0.01);
}

fn frame_accuracy(sigma: f64) -> f64 {
    let cfg = SynthConfig {
        noise_sigma: sigma,
        ..SynthConfig::default()
    };
    let v = SynthVocab::generate(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut hit, mut all) = (0, 0);
    for _ in 0..200 {
        let perceived: Vec<usize> = (0..6).map(|_| rng.random_range(0..cfg.num_phonemes)).collect();
        let (frames, labels) = synthesize_frames(&v, &perceived, &cfg, &mut rng);
        for (r, &l) in labels.iter().enumerate() {
            hit += usize::from(v.nearest_center(frames.row(r)) == l);
            all += 1;
        }
    }
    hit as f64 / all as f64
}

#[test]
fn nearest_center_accuracy_falls_with_noise() {
    let curve: Vec<f64> = [0.0, 0.5, 1.0, 1.5, 2.0].iter().map(|&s| frame_accuracy(s)).collect();
    assert_eq!(curve[0], 1.0);
    for w in curve.windows(2) {
        assert!(w[1] <= w[0], "{curve:?}");
    }
    assert!(curve[4] < curve[0]);
}

#[test]
fn regeneration_is_byte_identical() {
    let cfg = SynthConfig {
        num_utts: 30,
        ..SynthConfig::default()
    };
    let bytes = |seed| {
        let mut out = Vec::new();
        for u in generate(&cfg, seed).unwrap().utterances {
            write_features(&mut out, &u.frames).unwrap();
        }
        out
    };
    assert_eq!(bytes(4), bytes(4));
    assert_ne!(bytes(4), bytes(5));
}

#[test]
fn split_partitions_ids() {
    let ids: Vec<usize> = (0..97).collect();
    let [a, b, c] = split(&ids, (0.7, 0.15, 0.15), 2).unwrap();
    assert_eq!((a.len(), b.len(), c.len()), (68, 15, 14));
    let all: BTreeSet<usize> = a.iter().chain(&b).chain(&c).copied().collect();
    assert_eq!(all.len(), 97);
    assert_eq!(split(&ids, (1.0, 0.0, 0.0), 2).unwrap()[0].len(), 97);
}

fn random_input(rng: &mut ChaCha8Rng, n: usize, d: usize) -> FrameMatrix {
    let data = (0..n * d).map(|_| rng.random_range(0.5..1.5)).collect();
    FrameMatrix::new(Tensor::new(vec![n, d], data).unwrap(), 100.0).unwrap()
}

#[test]
fn masked_fraction_stays_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let policy = AugmentPolicy::default();
    for _ in 0..1000 {
        let n = rng.random_range(20..=60);
        let x = random_input(&mut rng, n, 16);
        let views = make_views(&x, &policy, &mut rng).unwrap();
        assert!(!views.unmasked_warning);
        for (view, stats) in [(&views.a, views.stats[0]), (&views.b, views.stats[1])] {
            assert_eq!(view.frames().shape(), x.frames().shape());
            let zero_rows = (0..n).filter(|&r| view.frames().row(r).iter().all(|&v| v == 0.0)).count();
            let frac = zero_rows as f64 / n as f64;
            assert!(frac > 0.1 && frac <= 0.3, "{frac}");
            assert_eq!(frac, stats.time_fraction);
            if stats.freq_blocks > 0 {
                assert!(stats.freq_fraction > 0.1 && stats.freq_fraction <= 0.3);
            }
        }
    }
}

#[test]
fn unwarped_views_keep_unmasked_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let policy = AugmentPolicy {
        warp_window: Some(0),
        freq_masking: false,
        ..AugmentPolicy::default()
    };
    let x = random_input(&mut rng, 40, 8);
    let views = make_views(&x, &policy, &mut rng).unwrap();
    for r in 0..40 {
        let row = views.a.frames().row(r);
        assert!(row.iter().all(|&v| v == 0.0) || row == x.frames().row(r));
    }
}

#[test]
fn views_differ_across_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut differ = 0;
    for _ in 0..200 {
        let policy = AugmentPolicy {
            max_mask_blocks: rng.random_range(1..=3),
            freq_masking: rng.random_bool(0.5),
            ..AugmentPolicy::default()
        };
        let n = rng.random_range(24..60);
        let x = random_input(&mut rng, n, 8);
        let views = make_views(&x, &policy, &mut rng).unwrap();
        differ += usize::from(views.a != views.b);
    }
    assert!(differ as f64 / 200.0 >= 0.99);
}

#[test]
fn short_utterances_come_back_unmasked() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random_input(&mut rng, 5, 4);
    let policy = AugmentPolicy {
        warp_window: Some(0),
        ..AugmentPolicy::default()
    };
    let views = make_views(&x, &policy, &mut rng).unwrap();
    assert!(views.unmasked_warning);
    assert_eq!(views.a.frames(), x.frames());
}
