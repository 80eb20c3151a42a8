//! Test-time noise injection and the robustness table.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::bleu::{corpus_bleu, sequence_accuracy};
use super::decode::{decode_corpus, BeamConfig};
use crate::augment::replacement_token;
use crate::data::{Sample, TaskKind};
use crate::error::{Error, Result};
use crate::model::Transformer;
use crate::seed;

pub const NOISE_RATIOS: [f64; 5] = [0.0, 0.02, 0.04, 0.08, 0.16];
pub const NOISE_HEADER: &str = "model,task,noise_kind,ratio,score,scaled_score";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseKind {
    ShuffleSpan,
    Replace,
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shuffle-span" => Ok(Self::ShuffleSpan),
            "replace" => Ok(Self::Replace),
            other => Err(Error::Config(format!("unknown noise kind {other:?} (expected shuffle-span or replace)"))),
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ShuffleSpan => "shuffle-span",
            Self::Replace => "replace",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub ratio: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("noise ratio must lie in [0, 1], got {}", self.ratio)));
        }
        Ok(())
    }
}

/// Number of noised tokens, `round(ratio · len)`.
pub fn noise_count(ratio: f64, len: usize) -> usize {
    ((ratio * len as f64).round() as usize).min(len)
}

/// Noises one sentence. A span shuffle of fewer than two tokens is a no-op.
pub fn inject_noise<R: Rng + ?Sized>(sentence: &[usize], kind: NoiseKind, ratio: f64, vocab_size: usize, rng: &mut R) -> Vec<usize> {
    let n = noise_count(ratio, sentence.len());
    let mut out = sentence.to_vec();
    match kind {
        NoiseKind::ShuffleSpan => {
            if n < 2 {
                return out;
            }
            let start = rng.gen_range(0..=sentence.len() - n);
            let identity: Vec<usize> = (0..n).collect();
            let mut perm = identity.clone();
            while perm == identity {
                perm.shuffle(rng);
            }
            for (k, &p) in perm.iter().enumerate() {
                out[start + k] = sentence[start + p];
            }
        }
        NoiseKind::Replace => {
            for j in index::sample(rng, sentence.len(), n) {
                if let Some(t) = replacement_token(vocab_size, sentence[j], rng) {
                    out[j] = t;
                }
            }
        }
    }
    out
}

/// Noises every source; sentence `i` draws from its own seeded stream.
pub fn noise_sources(samples: &[Sample], spec: &NoiseSpec, vocab_size: usize) -> Vec<Vec<usize>> {
    let stream = seed::derive(spec.seed, &format!("noise-{}", spec.kind));
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = seed::rng_indexed(stream, "sentence", i as u64);
            inject_noise(&s.source, spec.kind, spec.ratio, vocab_size, &mut rng)
        })
        .collect()
}

/// BLEU for toy translation, exact-match percentage for copy and reverse.
pub fn task_score(task: TaskKind, hypotheses: &[Vec<usize>], references: &[Vec<usize>]) -> Result<f64> {
    match task {
        TaskKind::ToyTranslation => corpus_bleu(hypotheses, references),
        TaskKind::Copy | TaskKind::Reverse => sequence_accuracy(hypotheses, references),
    }
}

pub fn score_model(model: &Transformer, task: TaskKind, sources: &[Vec<usize>], samples: &[Sample], beam: &BeamConfig) -> Result<f64> {
    let hyps: Vec<Vec<usize>> = decode_corpus(model, sources, beam)?.into_iter().map(|h| h.tokens).collect();
    let refs: Vec<Vec<usize>> = samples.iter().map(|s| s.target.clone()).collect();
    task_score(task, &hyps, &refs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseRow {
    pub model: String,
    pub task: TaskKind,
    pub kind: NoiseKind,
    pub ratio: f64,
    pub score: f64,
    /// `score / clean score`, 0 when the clean score is 0.
    pub scaled: f64,
}

impl NoiseRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.model, self.task, self.kind, self.ratio, self.score, self.scaled
        )
    }
}

pub fn scaled_score(score: f64, clean: f64) -> f64 {
    if clean == 0.0 {
        0.0
    } else {
        score / clean
    }
}

/// Scores every model on the test set under each noise kind and ratio.
pub fn noise_eval(
    models: &[(String, &Transformer)],
    task: TaskKind,
    test: &[Sample],
    kinds: &[NoiseKind],
    ratios: &[f64],
    beam: &BeamConfig,
    seed: u64,
) -> Result<Vec<NoiseRow>> {
    if test.is_empty() {
        return Err(Error::Usage("noise evaluation needs a non-empty test set".into()));
    }
    let mut rows = Vec::new();
    for (name, model) in models {
        if name.contains([',', '\n']) {
            return Err(Error::Usage(format!("model name {name:?} cannot be written to CSV")));
        }
        let clean_sources: Vec<Vec<usize>> = test.iter().map(|s| s.source.clone()).collect();
        let clean = score_model(model, task, &clean_sources, test, beam)?;
        for &kind in kinds {
            for &ratio in ratios {
                let spec = NoiseSpec { kind, ratio, seed };
                spec.validate()?;
                let score = if ratio == 0.0 {
                    clean
                } else {
                    let noised = noise_sources(test, &spec, model.config().vocab_size);
                    score_model(model, task, &noised, test, beam)?
                };
                log::info!("{name} {kind} {ratio}: {score:.3}");
                rows.push(NoiseRow {
                    model: name.clone(),
                    task,
                    kind,
                    ratio,
                    score,
                    scaled: scaled_score(score, clean),
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_noise_csv(path: &Path, rows: &[NoiseRow]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{NOISE_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.to_csv())?;
    }
    w.flush()?;
    Ok(())
}
