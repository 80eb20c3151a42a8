use std::collections::HashSet;

use bliss_core::augment::*;
use bliss_core::data::is_special;
use bliss_core::seed;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn distinct(len: usize) -> Vec<usize> {
    (5..5 + len).collect()
}

#[test]
fn count_distribution_matches_truncated_geometric() {
    let p: f64 = 0.2;
    let mut rng = seed::rng(1, "counts");
    for cap in [1usize, 2, 3, 5, 10] {
        // len 10 with alpha cap/10 gives exactly this cap
        let alpha = cap as f64 / 10.0;
        let n = 100_000;
        let mut hist = vec![0usize; cap + 1];
        for _ in 0..n {
            hist[sample_perturb_count(alpha, 10, p, false, &mut rng)] += 1;
        }
        assert_eq!(hist[0], 0);
        let z: f64 = (1..=cap).map(|i| p * (1.0 - p).powi(i as i32 - 1)).sum();
        for l in 1..=cap {
            let want = p * (1.0 - p).powi(l as i32 - 1) / z;
            let got = hist[l] as f64 / n as f64;
            assert!((got - want).abs() < 0.005, "cap {cap} l {l}: {got} vs {want}");
        }
    }
}

#[test]
fn gate_rate() {
    let mut rng = seed::rng(2, "gate");
    let hits = (0..100_000).filter(|_| gate_sentence(0.3, &mut rng)).count();
    assert!((hits as f64 / 1e5 - 0.3).abs() < 0.01);
}

#[test]
fn shuffles_stay_inside_the_window() {
    let seq = distinct(12);
    for s in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let window = 2 + (s as usize % 3);
        let out = shuffle_perturb(&seq, 1 + s as usize % 6, window, &mut rng);
        let mut sorted = out.perturbed.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, seq);
        for (j, &t) in out.perturbed.iter().enumerate() {
            assert!((t - 5).abs_diff(j) < window);
        }
    }
}

#[test]
fn replacements_are_content_and_change_the_token() {
    let seq = vec![5, 5, 6, 7, 5];
    for s in 0..10_000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let out = replace_perturb(&seq, 2, 12, &mut rng, &[]);
        assert_eq!(out.perturbed.iter().zip(&seq).filter(|(a, b)| a != b).count(), 2);
        for r in &out.records {
            let t = out.perturbed[r.position];
            assert!(!is_special(t) && t < 12 && t != r.original_token);
        }
    }
}

#[test]
fn bliss_sweep_respects_caps() {
    let config = AugmentConfig {
        mode: AugmentMode::Bliss,
        gamma: 0.3,
        alpha_shuffle: 0.1,
        alpha_replace: 0.1,
        p: 0.2,
        ..AugmentConfig::default()
    };
    for i in 0..10_000u64 {
        let len = 1 + (i as usize % 40);
        let seq = distinct(len);
        let out = augment_sentence(&seq, 60, &config, &mut sentence_rng(3, 0, i));
        let cap = perturb_cap(0.1, len);
        assert!(out.count(PerturbKind::Replaced) <= cap);
        // each swap touches two positions
        assert!(out.count(PerturbKind::Shuffled) <= 2 * cap.div_ceil(2));
    }
}

#[test]
fn gating_fraction_per_function() {
    let config = AugmentConfig {
        mode: AugmentMode::Bliss,
        gamma: 0.3,
        alpha_shuffle: 0.1,
        alpha_replace: 0.1,
        ..AugmentConfig::default()
    };
    let seq = distinct(20);
    let n = 100_000u64;
    let (mut shuffled, mut replaced) = (0, 0);
    for i in 0..n {
        let out = augment_sentence(&seq, 60, &config, &mut sentence_rng(4, 0, i));
        shuffled += usize::from(out.count(PerturbKind::Shuffled) > 0);
        replaced += usize::from(out.count(PerturbKind::Replaced) > 0);
    }
    assert!((shuffled as f64 / n as f64 - 0.3).abs() < 0.01);
    assert!((replaced as f64 / n as f64 - 0.3).abs() < 0.01);
}

fn bliss(gamma: f64, alpha_s: f64, alpha_r: f64, window: usize) -> AugmentConfig {
    AugmentConfig {
        mode: AugmentMode::Bliss,
        gamma,
        alpha_shuffle: alpha_s,
        alpha_replace: alpha_r,
        window,
        ..AugmentConfig::default()
    }
}

proptest! {
    #[test]
    fn outcome_invariants(
        seq in prop::collection::vec(5usize..15, 1..30),
        gamma in 0.0f64..=1.0,
        alpha_s in 0.0f64..=1.0,
        alpha_r in 0.0f64..=1.0,
        window in 2usize..5,
        s in any::<u64>(),
    ) {
        let config = bliss(gamma, alpha_s, alpha_r, window);
        let out = augment_sentence(&seq, 15, &config, &mut ChaCha8Rng::seed_from_u64(s));
        prop_assert_eq!(out.perturbed.len(), seq.len());
        let positions: HashSet<usize> = out.records.iter().map(|r| r.position).collect();
        prop_assert_eq!(positions.len(), out.records.len());
        for r in &out.records {
            prop_assert_eq!(r.original_token, seq[r.position]);
            match r.kind {
                PerturbKind::Replaced => {
                    prop_assert_ne!(out.perturbed[r.position], r.original_token);
                    prop_assert_eq!(r.origin_position, r.position);
                }
                PerturbKind::Shuffled => {
                    prop_assert!(r.position.abs_diff(r.origin_position) < window);
                    prop_assert_eq!(out.perturbed[r.position], seq[r.origin_position]);
                }
            }
        }
        // positions without a record keep their token
        for j in (0..seq.len()).filter(|j| !positions.contains(j)) {
            prop_assert_eq!(out.perturbed[j], seq[j]);
        }
        let sup = build_supervision(&out, seq.len(), 400, false).unwrap();
        for j in 0..seq.len() {
            let rec = out.records.iter().find(|r| r.position == j);
            prop_assert_eq!(sup.token_mask[j], rec.is_some());
            prop_assert_eq!(sup.pos_mask[j], rec.is_some_and(|r| r.kind == PerturbKind::Shuffled));
            if let Some(r) = rec {
                prop_assert_eq!(sup.token_labels[j], r.original_token);
                if r.kind == PerturbKind::Shuffled {
                    prop_assert_eq!(sup.pos_labels[j], r.origin_position);
                }
            } else {
                prop_assert_eq!((sup.token_labels[j], sup.pos_labels[j]), (0, 0));
            }
        }
    }

    #[test]
    fn shuffle_alone_keeps_the_multiset(seq in prop::collection::vec(5usize..9, 1..30), s in any::<u64>()) {
        let out = augment_sentence(&seq, 9, &bliss(1.0, 0.5, 0.0, 3), &mut ChaCha8Rng::seed_from_u64(s));
        let (mut a, mut b) = (out.perturbed, seq);
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn augmentation_is_deterministic(seq in prop::collection::vec(5usize..15, 1..30), i in any::<u64>()) {
        let config = bliss(0.7, 0.3, 0.3, 3);
        let a = augment_sentence(&seq, 15, &config, &mut sentence_rng(5, 2, i));
        let b = augment_sentence(&seq, 15, &config, &mut sentence_rng(5, 2, i));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn cap_is_monotone_in_alpha(len in 1usize..200, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(perturb_cap(lo, len) <= perturb_cap(hi, len));
    }
}
