//! Vocabularies, synthetic corpora and their on-disk formats.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const BLANK: usize = 4;
/// Number of reserved ids; content ids start here.
pub const NUM_SPECIALS: usize = 5;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<unk>", "<blank>"];

/// Default bound on sentence positions (size of the position classifier).
pub const DEFAULT_MAX_POSITIONS: usize = 400;

pub fn is_special(id: usize) -> bool {
    id < NUM_SPECIALS
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from content tokens; specials are prepended.
    pub fn from_content<I, S>(content: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(content.into_iter().map(Into::into))
            .collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::Config(format!(
                    "vocabulary id {i} must be {special}"
                )));
            }
        }
        if tokens.len() <= NUM_SPECIALS {
            return Err(Error::Config("vocabulary has no content tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid token {t:?} at id {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Vocabulary of `size` ids whose content tokens are named `w<id>`.
    pub fn synthetic(size: usize) -> Result<Self> {
        Self::from_content((NUM_SPECIALS..size).map(|i| format!("w{i}")))
    }

    /// Builds from whitespace-tokenized lines. Content tokens are ordered by
    /// descending frequency, ties broken lexicographically. Returns the number
    /// of empty lines skipped.
    pub fn build<'a>(lines: impl IntoIterator<Item = &'a str>) -> Result<(Self, usize)> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut skipped = 0;
        for line in lines {
            let mut any = false;
            for tok in line.split_whitespace() {
                if !SPECIAL_TOKENS.contains(&tok) {
                    *counts.entry(tok).or_default() += 1;
                }
                any = true;
            }
            if !any {
                skipped += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let vocab = Self::from_content(ranked.into_iter().map(|(t, _)| t))?;
        Ok((vocab, skipped))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn content_ids(&self) -> std::ops::Range<usize> {
        NUM_SPECIALS..self.tokens.len()
    }

    /// Unknown tokens map to `<unk>`.
    pub fn encode_line(&self, line: &str) -> Vec<usize> {
        line.split_whitespace()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    pub fn decode_ids(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(SPECIAL_TOKENS[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Encodes non-empty lines; returns the encoded lines and the number of
    /// empty lines skipped.
    pub fn encode_lines<'a>(&self, lines: impl IntoIterator<Item = &'a str>) -> (Vec<Vec<usize>>, usize) {
        let mut skipped = 0;
        let mut out = Vec::new();
        for line in lines {
            let ids = self.encode_line(line);
            if ids.is_empty() {
                skipped += 1;
            } else {
                out.push(ids);
            }
        }
        (out, skipped)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// One source/target pair. Neither side stores `<bos>`/`<eos>`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Sample {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Copy,
    Reverse,
    ToyTranslation,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            "toy-translation" => Ok(Self::ToyTranslation),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected copy, reverse or toy-translation)"
            ))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Copy => "copy",
            Self::Reverse => "reverse",
            Self::ToyTranslation => "toy-translation",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub task: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub samples: usize,
    pub seed: u64,
    /// Position bound of the model that will consume the corpus.
    pub max_positions: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            task: TaskKind::ToyTranslation,
            vocab_size: 200,
            min_len: 8,
            max_len: 16,
            samples: 20_000,
            seed: 1,
            max_positions: DEFAULT_MAX_POSITIONS,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= NUM_SPECIALS {
            return Err(Error::Config(format!(
                "vocab_size must exceed {NUM_SPECIALS}, got {}",
                self.vocab_size
            )));
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "length range [{}, {}] is empty or starts below 1",
                self.min_len, self.max_len
            )));
        }
        if self.max_len + 2 > self.max_positions {
            return Err(Error::Config(format!(
                "max_len {} leaves no room for <bos>/<eos> within {} positions",
                self.max_len, self.max_positions
            )));
        }
        if self.samples == 0 {
            return Err(Error::Config("sample count must be positive".into()));
        }
        Ok(())
    }
}

/// Zipf sampler over ranks `0..n` with `P(rank k) ∝ (k+1)^-s`, drawn through
/// an integer cumulative table.
#[derive(Clone, Debug)]
pub struct ZipfSampler {
    cumulative: Vec<u64>,
}

impl ZipfSampler {
    const SCALE: f64 = (1u64 << 52) as f64;

    pub fn new(n: usize, exponent: f64) -> Self {
        assert!(n > 0, "zipf support must be non-empty");
        let weights: Vec<f64> = (1..=n).map(|k| (k as f64).powf(-exponent)).collect();
        let total: f64 = weights.iter().sum();
        let mut acc = 0u64;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += ((w / total) * Self::SCALE).round().max(1.0) as u64;
                acc
            })
            .collect();
        Self { cumulative }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().expect("non-empty");
        let u = rng.gen_range(0..total);
        self.cumulative.partition_point(|&c| c <= u)
    }
}

/// The token-level bijection plus pairwise reordering of the toy translation task.
#[derive(Clone, Debug)]
pub struct ToyTranslator {
    map: Vec<usize>,
}

impl ToyTranslator {
    /// Seeded random bijection over the content ids of a `vocab_size` vocabulary.
    pub fn seeded(vocab_size: usize, seed: u64) -> Self {
        let mut content: Vec<usize> = (NUM_SPECIALS..vocab_size).collect();
        content.shuffle(&mut seed::rng(seed, "toy-bijection"));
        let map = (0..NUM_SPECIALS).chain(content).collect();
        Self { map }
    }

    pub fn identity(vocab_size: usize) -> Self {
        Self {
            map: (0..vocab_size).collect(),
        }
    }

    /// Maps every token, then swaps each adjacent pair starting at an even index.
    pub fn translate(&self, source: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = source.iter().map(|&t| self.map[t]).collect();
        for pair in out.chunks_exact_mut(2) {
            pair.swap(0, 1);
        }
        out
    }
}

pub const ZIPF_EXPONENT: f64 = 1.2;

pub fn gen_synthetic(spec: &CorpusSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let zipf = ZipfSampler::new(spec.vocab_size - NUM_SPECIALS, ZIPF_EXPONENT);
    let translator = ToyTranslator::seeded(spec.vocab_size, spec.seed);
    let mut rng = seed::rng(spec.seed, "corpus");
    let samples = (0..spec.samples)
        .map(|_| {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let source: Vec<usize> = (0..len).map(|_| NUM_SPECIALS + zipf.sample(&mut rng)).collect();
            let target = match spec.task {
                TaskKind::Copy => source.clone(),
                TaskKind::Reverse => source.iter().rev().copied().collect(),
                TaskKind::ToyTranslation => translator.translate(&source),
            };
            Sample { source, target }
        })
        .collect();
    Ok(samples)
}

fn format_ids(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

pub(crate) fn parse_ids(field: &str) -> std::result::Result<Vec<usize>, String> {
    field
        .split(' ')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<usize>().map_err(|_| format!("invalid token id {t:?}")))
        .collect()
}

pub fn save_corpus(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in samples {
        writeln!(w, "{}\t{}", format_ids(&s.source), format_ids(&s.target))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path)?;
    let err = |line: usize, message: String| Error::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let (src, tgt) = line
            .split_once('\t')
            .ok_or_else(|| err(lineno, "expected <source ids>\\t<target ids>".into()))?;
        let source = parse_ids(src).map_err(|m| err(lineno, m))?;
        let target = parse_ids(tgt).map_err(|m| err(lineno, m))?;
        if source.is_empty() || target.is_empty() {
            return Err(err(lineno, "empty source or target".into()));
        }
        if source.iter().chain(&target).any(|&t| is_special(t)) {
            return Err(err(lineno, "reserved id inside a stored sequence".into()));
        }
        samples.push(Sample { source, target });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_definitions() {
        let id = ToyTranslator::identity(20);
        assert_eq!(id.translate(&[7, 8, 9, 10]), vec![8, 7, 10, 9]);
        assert_eq!(id.translate(&[7, 8, 9]), vec![8, 7, 9]);
        let spec = CorpusSpec {
            task: TaskKind::Reverse,
            vocab_size: 30,
            samples: 50,
            ..CorpusSpec::default()
        };
        for s in gen_synthetic(&spec).unwrap() {
            let mut r = s.source.clone();
            r.reverse();
            assert_eq!(r, s.target);
        }
        let spec = CorpusSpec {
            task: TaskKind::Copy,
            ..spec
        };
        for s in gen_synthetic(&spec).unwrap() {
            assert_eq!(s.source, s.target);
            assert!(s.source.iter().all(|&t| !is_special(t) && t < 30));
            assert!((8..=16).contains(&s.source.len()));
        }
    }

    #[test]
    fn seeded_bijection_is_a_permutation_of_content() {
        let t = ToyTranslator::seeded(50, 3);
        let mut mapped = t.map.clone();
        assert_eq!(&mapped[..NUM_SPECIALS], &[0, 1, 2, 3, 4]);
        mapped.sort_unstable();
        assert_eq!(mapped, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_specs_rejected() {
        let base = CorpusSpec::default();
        for bad in [
            CorpusSpec { min_len: 0, ..base.clone() },
            CorpusSpec { min_len: 9, max_len: 8, ..base.clone() },
            CorpusSpec { max_len: 399, ..base.clone() },
            CorpusSpec { vocab_size: 5, ..base.clone() },
            CorpusSpec { samples: 0, ..base.clone() },
        ] {
            assert!(matches!(gen_synthetic(&bad), Err(Error::Config(_))), "{bad:?}");
        }
        assert!(CorpusSpec { max_len: 398, ..base }.validate().is_ok());
    }

    #[test]
    fn vocabulary_round_trip_and_unknowns() {
        let lines = ["a b c a", "", "c d"];
        let (vocab, skipped) = Vocabulary::build(lines).unwrap();
        assert_eq!(skipped, 1);
        assert_eq!(vocab.token(NUM_SPECIALS), Some("a"));
        assert_eq!(vocab.decode_ids(&vocab.encode_line("d a c")), "d a c");
        assert_eq!(vocab.encode_line("a zzz"), vec![vocab.id("a").unwrap(), UNK]);
        let (encoded, skipped) = vocab.encode_lines(lines);
        assert_eq!((encoded.len(), skipped), (2, 1));
    }

    #[test]
    fn vocabulary_rejects_bad_headers() {
        assert!(Vocabulary::from_tokens(vec!["<pad>".into(), "x".into()]).is_err());
        assert!(Vocabulary::from_content(Vec::<String>::new()).is_err());
        assert!(Vocabulary::from_content(["a", "a"]).is_err());
    }
}
