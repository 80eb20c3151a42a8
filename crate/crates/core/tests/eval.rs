use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use bliss_core::data::{gen_synthetic, CorpusSpec, Sample, TaskKind, BOS, EOS};
use bliss_core::eval::noise::{noise_sources, write_noise_csv, NOISE_HEADER, NOISE_RATIOS};
use bliss_core::eval::probe::length_buckets;
use bliss_core::eval::*;
use bliss_core::model::{ModelConfig, SourceBatch, Transformer};
use bliss_core::seed;
use bliss_core::train::{train, TrainConfig};
use bliss_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

#[test]
fn bleu_of_identical_corpus_is_100() {
    let refs = vec![words("the cat sat on the mat"), words("a b c d e f g")];
    assert!((corpus_bleu(&refs, &refs).unwrap() - 100.0).abs() < 1e-6);
}

#[test]
fn bleu_clipped_unigram_precision() {
    let hyp = vec![words("the the the the the the the")];
    let refs = vec![words("the cat is on the mat")];
    assert_eq!(ngram_precision(&hyp, &refs, 1), (2, 7));
    assert_eq!(corpus_bleu(&hyp, &refs).unwrap(), 0.0);
}

#[test]
fn bleu_brevity_penalty() {
    let hyp = vec![words("the cat sat on the")];
    let refs = vec![words("the cat sat on the mat")];
    // all precisions are 1; c = 5, r = 6
    let expected = 100.0 * (1.0f64 - 6.0 / 5.0).exp();
    assert!((corpus_bleu(&hyp, &refs).unwrap() - expected).abs() < 1e-6);
    assert!((expected - 81.873_075_307_798_18).abs() < 1e-9);
}

#[test]
fn bleu_edge_cases() {
    let none: Vec<Vec<&str>> = Vec::new();
    assert!(matches!(corpus_bleu(&none, &none), Err(Error::Usage(_))));
    assert_eq!(corpus_bleu(&[vec![]], &[words("a b c d")]).unwrap(), 0.0);
    let hyps = vec![words("a b c d e"), vec![]];
    let refs = vec![words("a b c d e"), words("f g h i j")];
    let expected = 100.0 * (1.0f64 - 10.0 / 5.0).exp();
    assert!((corpus_bleu(&hyps, &refs).unwrap() - expected).abs() < 1e-9);
}

proptest! {
    #[test]
    fn bleu_ignores_sentence_order(
        pairs in prop::collection::vec(
            (prop::collection::vec(0u8..6, 0..9), prop::collection::vec(0u8..6, 1..9)), 1..8),
        rotate in 0usize..8,
    ) {
        let (h, r): (Vec<Vec<u8>>, Vec<Vec<u8>>) = pairs.iter().cloned().unzip();
        let k = rotate % h.len();
        let (mut h2, mut r2) = (h.clone(), r.clone());
        h2.rotate_left(k);
        r2.rotate_left(k);
        h2.reverse();
        r2.reverse();
        let a = corpus_bleu(&h, &r).unwrap();
        let b = corpus_bleu(&h2, &r2).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert!((0.0..=100.0 + 1e-9).contains(&a));
    }
}

/// Deterministic pseudo-random next-token distributions keyed by prefix.
struct ToyScorer {
    vocab: usize,
    seed: u64,
}

impl ToyScorer {
    fn dist(&self, prefix: &[usize]) -> Vec<f64> {
        let mut h = DefaultHasher::new();
        (self.seed, prefix).hash(&mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        let w: Vec<f64> = (0..self.vocab).map(|_| (3.0 * rng.gen::<f64>()).exp()).collect();
        let z: f64 = w.iter().sum();
        w.iter().map(|x| (x / z).ln()).collect()
    }
}

impl StepScorer for ToyScorer {
    fn log_probs(&mut self, prefixes: &[Vec<usize>]) -> bliss_core::Result<Vec<Vec<f64>>> {
        Ok(prefixes.iter().map(|p| self.dist(p)).collect())
    }
}

/// Best complete-or-truncated output by exhaustive enumeration.
fn exhaustive(scorer: &ToyScorer, max_len: usize) -> (Vec<usize>, f64, bool) {
    fn walk(s: &ToyScorer, prefix: &mut Vec<usize>, lp: f64, max_len: usize, best: &mut (Vec<usize>, f64, bool)) {
        let d = s.dist(prefix);
        for tok in 0..s.vocab {
            if tok == BOS {
                continue;
            }
            let total = lp + d[tok];
            if tok == EOS {
                if total > best.1 {
                    *best = (prefix[1..].to_vec(), total, true);
                }
            } else if prefix.len() == max_len {
                if total > best.1 {
                    let mut t = prefix[1..].to_vec();
                    t.push(tok);
                    *best = (t, total, false);
                }
            } else {
                prefix.push(tok);
                walk(s, prefix, total, max_len, best);
                prefix.pop();
            }
        }
    }
    let mut best = (Vec::new(), f64::NEG_INFINITY, false);
    walk(scorer, &mut vec![BOS], 0.0, max_len, &mut best);
    best
}

#[test]
fn full_beam_matches_exhaustive_search() {
    for seed in 0..30 {
        let vocab = 6;
        let mut scorer = ToyScorer { vocab, seed };
        for max_len in 1..=3 {
            let (tokens, lp, finished) = exhaustive(&scorer, max_len);
            let hyp = beam_search(
                &mut scorer,
                &BeamConfig {
                    beam_size: vocab,
                    length_penalty: 0.0,
                    max_len,
                },
            )
            .unwrap();
            assert_eq!((hyp.tokens.clone(), hyp.finished), (tokens, finished), "seed {seed} max_len {max_len}");
            assert!((hyp.log_prob - lp).abs() < 1e-12);
        }
    }
}

/// Step one prefers token 5, but 6 followed by eos is the most likely output.
struct TwoStep;

impl StepScorer for TwoStep {
    fn log_probs(&mut self, prefixes: &[Vec<usize>]) -> bliss_core::Result<Vec<Vec<f64>>> {
        Ok(prefixes
            .iter()
            .map(|p| {
                let mut probs = vec![0.0; 7];
                match p.as_slice() {
                    [BOS] => {
                        probs[5] = 0.5;
                        probs[6] = 0.4;
                        probs[EOS] = 0.1;
                    }
                    [BOS, 5] => probs[3..7].iter_mut().for_each(|x| *x = 0.25),
                    [BOS, 6] => {
                        probs[EOS] = 0.9;
                        probs[3] = 0.1;
                    }
                    _ => probs[EOS] = 1.0,
                }
                probs.iter().map(|x: &f64| x.ln()).collect()
            })
            .collect())
    }
}

#[test]
fn wider_beam_recovers_what_greedy_misses() {
    let greedy = beam_search(&mut TwoStep, &BeamConfig::greedy(2)).unwrap();
    assert_eq!(greedy.tokens[0], 5);
    let beam = beam_search(
        &mut TwoStep,
        &BeamConfig {
            beam_size: 2,
            length_penalty: 0.0,
            max_len: 2,
        },
    )
    .unwrap();
    assert_eq!((beam.tokens, beam.finished), (vec![6], true));
    assert!((beam.log_prob - (0.4f64 * 0.9).ln()).abs() < 1e-12);
}

#[test]
fn exhausting_max_len_flags_unfinished() {
    struct NeverStop;
    impl StepScorer for NeverStop {
        fn log_probs(&mut self, prefixes: &[Vec<usize>]) -> bliss_core::Result<Vec<Vec<f64>>> {
            Ok(prefixes
                .iter()
                .map(|_| {
                    let mut lp = vec![-30.0; 6];
                    lp[5] = -1e-6;
                    lp
                })
                .collect())
        }
    }
    let h = beam_search(&mut NeverStop, &BeamConfig { beam_size: 3, length_penalty: 1.0, max_len: 4 }).unwrap();
    assert_eq!(h.tokens, vec![5; 4]);
    assert!(!h.finished);
}

fn micro_model(seed: u64) -> Transformer {
    Transformer::new(
        ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ffn: 32,
            vocab_size: 30,
            max_positions: 24,
            dropout: 0.0,
            ..ModelConfig::default()
        },
        seed,
    )
    .unwrap()
}

fn random_sources(n: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = seed::rng(seed, "sources");
    (0..n)
        .map(|_| (0..rng.gen_range(1..=10)).map(|_| rng.gen_range(5..30)).collect())
        .collect()
}

#[test]
fn beam_of_one_equals_greedy() {
    let model = micro_model(2);
    let sources = random_sources(100, 1);
    let greedy = greedy_decode(&model, &sources, 12).unwrap();
    let config = BeamConfig {
        beam_size: 1,
        length_penalty: 0.0,
        max_len: 12,
    };
    for (s, g) in sources.iter().zip(&greedy) {
        let b = beam_decode(&model, s, &config).unwrap();
        assert_eq!((&b.tokens, b.finished), (&g.tokens, g.finished));
        assert!((b.log_prob - g.log_prob).abs() < 1e-9);
    }
}

#[test]
fn wider_beams_never_score_worse() {
    let model = micro_model(4);
    for s in random_sources(30, 8) {
        let mut last = f64::NEG_INFINITY;
        for b in [1, 2, 4, 8] {
            let config = BeamConfig {
                beam_size: b,
                length_penalty: 1.0,
                max_len: 10,
            };
            let score = beam_decode(&model, &s, &config).unwrap().score(1.0);
            assert!(score >= last - 1e-12, "beam {b} scored {score} below {last} on {s:?}");
            last = score;
        }
    }
}

#[test]
fn beam_config_is_validated() {
    let model = micro_model(1);
    assert!(beam_decode(&model, &[5], &BeamConfig { beam_size: 0, ..BeamConfig::default() }).is_err());
    assert!(beam_decode(&model, &[5], &BeamConfig { max_len: 25, ..BeamConfig::default() }).is_err());
}

#[test]
fn zero_ratio_noise_is_identity() {
    let mut rng = seed::rng(1, "t");
    let s: Vec<usize> = (5..17).collect();
    for kind in [NoiseKind::Replace, NoiseKind::ShuffleSpan] {
        assert_eq!(inject_noise(&s, kind, 0.0, 40, &mut rng), s);
    }
    // a span of one token cannot be shuffled
    assert_eq!(inject_noise(&s, NoiseKind::ShuffleSpan, 0.1, 40, &mut rng), s);
}

#[test]
fn replace_noise_changes_the_rounded_count() {
    let s: Vec<usize> = (5..15).collect();
    for i in 0..500 {
        let mut rng = seed::rng_indexed(3, "replace", i);
        let out = inject_noise(&s, NoiseKind::Replace, 0.16, 40, &mut rng);
        assert_eq!(out.iter().zip(&s).filter(|(a, b)| a != b).count(), 2);
        assert!(out.iter().all(|&t| (5..40).contains(&t)));
    }
}

#[test]
fn span_shuffle_permutes_one_contiguous_span() {
    let s: Vec<usize> = (5..25).collect();
    for i in 0..1000 {
        let mut rng = seed::rng_indexed(4, "span", i);
        let ratio = [0.1, 0.16, 0.3, 1.0][i as usize % 4];
        let out = inject_noise(&s, NoiseKind::ShuffleSpan, ratio, 40, &mut rng);
        let n = (ratio * 20.0).round() as usize;
        let changed: Vec<usize> = (0..20).filter(|&j| out[j] != s[j]).collect();
        assert!(!changed.is_empty());
        let (lo, hi) = (changed[0], *changed.last().unwrap());
        assert!(hi - lo < n, "changes span {lo}..={hi} wider than {n}");
        let mut a = out[lo..=hi].to_vec();
        a.sort_unstable();
        assert_eq!(a, s[lo..=hi].to_vec());
    }
}

fn toy_test_set(n: usize) -> Vec<Sample> {
    gen_synthetic(&CorpusSpec {
        task: TaskKind::ToyTranslation,
        vocab_size: 30,
        min_len: 4,
        max_len: 10,
        samples: n,
        seed: 5,
        max_positions: 24,
    })
    .unwrap()
}

#[test]
fn noising_a_corpus_is_reproducible_and_keeps_tokens() {
    let test = toy_test_set(50);
    let spec = NoiseSpec {
        kind: NoiseKind::ShuffleSpan,
        ratio: 0.3,
        seed: 9,
    };
    let a = noise_sources(&test, &spec, 30);
    assert_eq!(a, noise_sources(&test, &spec, 30));
    for (n, s) in a.iter().zip(&test) {
        let (mut x, mut y) = (n.clone(), s.source.clone());
        x.sort_unstable();
        y.sort_unstable();
        assert_eq!(x, y);
    }
}

#[test]
fn noise_table_normalizes_against_clean() {
    let test = toy_test_set(20);
    let (m1, m2) = (micro_model(1), micro_model(2));
    let rows = noise_eval(
        &[("a".into(), &m1), ("b".into(), &m2)],
        TaskKind::ToyTranslation,
        &test,
        &[NoiseKind::Replace, NoiseKind::ShuffleSpan],
        &NOISE_RATIOS,
        &BeamConfig::greedy(12),
        3,
    )
    .unwrap();
    assert_eq!(rows.len(), 2 * 2 * NOISE_RATIOS.len());
    for name in ["a", "b"] {
        let model = if name == "a" { &m1 } else { &m2 };
        let sources: Vec<Vec<usize>> = test.iter().map(|s| s.source.clone()).collect();
        let hyps: Vec<Vec<usize>> = greedy_decode(model, &sources, 12).unwrap().into_iter().map(|h| h.tokens).collect();
        let refs: Vec<Vec<usize>> = test.iter().map(|s| s.target.clone()).collect();
        let clean = corpus_bleu(&hyps, &refs).unwrap();
        for r in rows.iter().filter(|r| r.model == name && r.ratio == 0.0) {
            assert_eq!(r.score, clean);
            assert_eq!(r.scaled, if clean == 0.0 { 0.0 } else { 1.0 });
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("noise.csv");
    write_noise_csv(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next(), Some(NOISE_HEADER));
    assert_eq!(text.lines().count(), rows.len() + 1);
    assert!(text.lines().nth(1).unwrap().starts_with("a,toy-translation,replace,0,"));
}

#[test]
fn pooled_representations() {
    let model = micro_model(6);
    let sentences = vec![vec![9], vec![5, 6, 7, 8, 9, 10, 11], vec![12, 13]];
    let reps = extract_representations(&model, &sentences).unwrap();
    assert_eq!(reps.len(), 3);
    let single = model.encode_sentence(&[9]).unwrap();
    for (a, b) in reps[0].iter().zip(single.row(1)) {
        assert!((a - b).abs() < 1e-12);
    }
    // the same sentence pooled in a padded batch and on its own
    let alone = extract_representations(&model, &sentences[2..]).unwrap();
    for (a, b) in reps[2].iter().zip(&alone[0]) {
        assert!((a - b).abs() < 1e-12);
    }
    let src = SourceBatch::new(&sentences, 24).unwrap();
    assert_eq!(src.width, 9);
}

#[test]
fn probe_rejects_a_single_class() {
    let features = vec![vec![0.0, 1.0]; 10];
    assert!(matches!(probe(&features, &[2; 10], &ProbeConfig::default()), Err(Error::Usage(_))));
}

#[test]
fn probe_on_random_features_is_at_chance() {
    let mut rng = seed::rng(11, "features");
    let n = 5000;
    let features: Vec<Vec<f64>> = (0..n).map(|_| (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let r = probe(&features, &labels, &ProbeConfig::default()).unwrap();
    assert_eq!((r.train_size, r.valid_size), (4000, 1000));
    assert!((r.accuracy - 0.5).abs() < 0.05, "accuracy {}", r.accuracy);
}

#[test]
fn probe_learns_a_separable_task() {
    let mut rng = seed::rng(12, "features");
    let features: Vec<Vec<f64>> = (0..1000).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let labels: Vec<usize> = features.iter().map(|f| usize::from(f[0] + f[1] > 0.0)).collect();
    let r = probe(&features, &labels, &ProbeConfig::default()).unwrap();
    assert!(r.accuracy > 0.9, "accuracy {}", r.accuracy);
}

#[test]
fn length_buckets_have_similar_mass() {
    let lengths: Vec<usize> = (0..6000).map(|i| 8 + i % 9).collect();
    let b = length_buckets(&lengths, 6);
    let mut counts = [0usize; 6];
    b.iter().for_each(|&k| counts[k] += 1);
    assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
    // monotone in length
    for (i, &l) in lengths.iter().enumerate() {
        for (j, &m) in lengths.iter().enumerate().take(20) {
            if l < m {
                assert!(b[i] <= b[j]);
            }
        }
    }
}

#[test]
fn shift_probe_swaps_half_the_sentences() {
    let sentences = random_sources(400, 3)
        .into_iter()
        .filter(|s| s.len() >= 2)
        .collect::<Vec<_>>();
    let (inputs, labels) = probe_dataset(ProbeTask::BShift, &sentences, 4);
    let ones = labels.iter().filter(|&&l| l == 1).count();
    assert!(ones.abs_diff(sentences.len() / 2) <= sentences.len() / 20);
    for ((x, s), &l) in inputs.iter().zip(&sentences).zip(&labels) {
        let diff: Vec<usize> = (0..s.len()).filter(|&j| x[j] != s[j]).collect();
        if l == 1 {
            assert_eq!(diff.len(), 2);
            assert_eq!(diff[1], diff[0] + 1);
            assert_eq!((x[diff[0]], x[diff[1]]), (s[diff[1]], s[diff[0]]));
        } else {
            assert!(diff.is_empty());
        }
    }
}

#[test]
fn trained_copy_model_decodes_and_encodes_length() {
    let spec = CorpusSpec {
        task: TaskKind::Copy,
        samples: 20_500,
        seed: 2,
        ..CorpusSpec::default()
    };
    let corpus = gen_synthetic(&spec).unwrap();
    let (train_set, test) = corpus.split_at(20_000);
    let config = TrainConfig {
        model: ModelConfig {
            vocab_size: spec.vocab_size,
            ..ModelConfig::default()
        },
        max_steps: 2000,
        batch_size: 32,
        seed: 2,
        ..TrainConfig::default()
    };
    let mut config = config;
    config.ablation.no_aug = true;
    let report = train(&config, train_set).unwrap();
    let sources: Vec<Vec<usize>> = test.iter().map(|s| s.source.clone()).collect();
    let hyps = greedy_decode(report.model(), &sources, 30).unwrap();
    let mut correct = 0;
    let mut total = 0;
    for (h, s) in hyps.iter().zip(test) {
        correct += s.target.iter().zip(&h.tokens).filter(|(a, b)| a == b).count();
        total += s.target.len();
    }
    let accuracy = correct as f64 / total as f64;
    assert!(accuracy >= 0.99, "copy token accuracy {accuracy}");
    let exact = hyps.iter().zip(test).filter(|(h, s)| h.tokens == s.target).count();
    assert!(exact * 10 >= test.len() * 9, "{exact} of {} reproduced", test.len());

    let r = probe_model(report.model(), ProbeTask::SeLen, &sources, &ProbeConfig::default()).unwrap();
    assert!(r.accuracy > r.majority_baseline, "SeLen {} vs prior {}", r.accuracy, r.majority_baseline);
}

#[test]
fn bliss_heads_learn_on_copy() {
    let spec = CorpusSpec {
        task: TaskKind::Copy,
        samples: 20_000,
        seed: 2,
        ..CorpusSpec::default()
    };
    let corpus = gen_synthetic(&spec).unwrap();
    let config = TrainConfig {
        model: ModelConfig {
            vocab_size: spec.vocab_size,
            ..ModelConfig::default()
        },
        max_steps: 1000,
        seed: 2,
        ..TrainConfig::default()
    };
    let report = train(&config, &corpus).unwrap();
    let (first, last) = (&report.metrics[0], report.metrics.last().unwrap());
    assert!(last.loss_token < first.loss_token && last.loss_pos < first.loss_pos);
    assert!(last.token_head_acc > 4.0 * first.token_head_acc, "{} -> {}", first.token_head_acc, last.token_head_acc);
    assert!(last.pos_head_acc > 4.0 * first.pos_head_acc, "{} -> {}", first.pos_head_acc, last.pos_head_acc);
}
