use bliss_core::data::*;
use bliss_core::seed;
use bliss_core::Error;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

fn spec(task: TaskKind, samples: usize, seed: u64) -> CorpusSpec {
    CorpusSpec {
        task,
        samples,
        seed,
        ..CorpusSpec::default()
    }
}

#[test]
fn large_corpus_round_trips_hash_identically() {
    let corpus = gen_synthetic(&spec(TaskKind::ToyTranslation, 10_000, 4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.tsv"), dir.path().join("b.tsv"));
    save_corpus(&a, &corpus).unwrap();
    let loaded = load_corpus(&a).unwrap();
    assert_eq!(loaded, corpus);
    save_corpus(&b, &loaded).unwrap();
    let hash = |p: &std::path::Path| Sha256::digest(std::fs::read(p).unwrap());
    assert_eq!(hash(&a), hash(&b));
}

#[test]
fn malformed_corpus_line_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.tsv");
    std::fs::write(&path, "5 6\t6 5\n7 x\t7 8\n").unwrap();
    match load_corpus(&path) {
        Err(Error::Parse { line, message, .. }) => {
            assert_eq!(line, 2);
            assert!(message.contains("\"x\""), "{message}");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
    std::fs::write(&path, "5 6\n").unwrap();
    assert!(matches!(load_corpus(&path), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn generation_is_deterministic_per_seed() {
    for task in [TaskKind::Copy, TaskKind::Reverse, TaskKind::ToyTranslation] {
        let a = gen_synthetic(&spec(task, 500, 8)).unwrap();
        assert_eq!(a, gen_synthetic(&spec(task, 500, 8)).unwrap());
        assert_ne!(a, gen_synthetic(&spec(task, 500, 9)).unwrap());
        let s = spec(task, 500, 8);
        for sample in &a {
            assert!((s.min_len..=s.max_len).contains(&sample.source.len()));
            assert_eq!(sample.source.len(), sample.target.len());
            assert!(sample.source.iter().chain(&sample.target).all(|&t| !is_special(t) && t < s.vocab_size));
        }
    }
}

#[test]
fn zipf_head_ratio() {
    let zipf = ZipfSampler::new(195, ZIPF_EXPONENT);
    let mut rng = seed::rng(1, "zipf");
    let mut counts = [0u64; 2];
    for _ in 0..1_000_000 {
        let r = zipf.sample(&mut rng);
        if r < 2 {
            counts[r] += 1;
        }
    }
    let ratio = counts[0] as f64 / counts[1] as f64;
    let expected = 2f64.powf(1.2);
    assert!((ratio / expected - 1.0).abs() < 0.05, "ratio {ratio} vs {expected}");
}

#[test]
fn vocabulary_file_reload_keeps_ids() {
    let lines = ["the cat sat", "on the mat", "", "a cat"];
    let (vocab, skipped) = Vocabulary::build(lines.iter().copied()).unwrap();
    assert_eq!(skipped, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    vocab.save(&path).unwrap();
    let reloaded = Vocabulary::load(&path).unwrap();
    assert_eq!(reloaded, vocab);
    for tok in ["the", "cat", "sat", "on", "mat", "a"] {
        assert_eq!(reloaded.id(tok), vocab.id(tok));
    }
    assert_eq!(vocab.encode_line("the dog"), vec![vocab.id("the").unwrap(), UNK]);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().take(NUM_SPECIALS).collect::<Vec<_>>(), SPECIAL_TOKENS);
}

proptest! {
    #[test]
    fn in_vocabulary_lines_round_trip(words in prop::collection::vec("[a-z]{1,5}", 1..12)) {
        let line = words.join(" ");
        let (vocab, _) = Vocabulary::build([line.as_str()]).unwrap();
        let ids = vocab.encode_line(&line);
        prop_assert!(ids.iter().all(|&i| !is_special(i)));
        prop_assert_eq!(vocab.decode_ids(&ids), line);
    }

    #[test]
    fn toy_translation_inverts_through_its_swap(src in prop::collection::vec(5usize..40, 1..20)) {
        let t = ToyTranslator::identity(40).translate(&src);
        let back = ToyTranslator::identity(40).translate(&t);
        prop_assert_eq!(back, src);
    }
}
