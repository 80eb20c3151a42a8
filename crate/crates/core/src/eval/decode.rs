//! Greedy and beam decoding.

use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{argmax, EncodedBatch, SourceBatch, Transformer};

/// Sentences encoded together when decoding a corpus.
const DECODE_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Exponent of the length normalization `log p / len^lp`.
    pub length_penalty: f64,
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: 4,
            length_penalty: 1.0,
            max_len: 40,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self, max_positions: usize) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if self.max_len == 0 || self.max_len > max_positions {
            return Err(Error::Config(format!(
                "max_len must lie in [1, {max_positions}], got {}",
                self.max_len
            )));
        }
        if !self.length_penalty.is_finite() || self.length_penalty < 0.0 {
            return Err(Error::Config(format!("length_penalty must be non-negative, got {}", self.length_penalty)));
        }
        Ok(())
    }

    pub fn greedy(max_len: usize) -> Self {
        Self {
            beam_size: 1,
            length_penalty: 0.0,
            max_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Output tokens without bos/eos.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// False when `max_len` was reached before eos.
    pub finished: bool,
}

impl Hypothesis {
    /// Generated length, counting the eos of a finished hypothesis.
    pub fn len(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn score(&self, length_penalty: f64) -> f64 {
        if length_penalty == 0.0 {
            self.log_prob
        } else {
            self.log_prob / (self.len() as f64).powf(length_penalty)
        }
    }
}

/// Next-token log-probabilities for a set of prefixes (each starting with bos).
pub trait StepScorer {
    fn log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// Scores prefixes of one encoded source sentence.
pub struct ModelScorer<'a> {
    model: &'a Transformer,
    encoded: EncodedBatch,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Transformer, source: &[usize]) -> Result<Self> {
        let src = SourceBatch::new(&[source], model.config().max_positions)?;
        Ok(Self {
            model,
            encoded: model.encode_batch(&src)?,
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let rows = self.encoded.select(&vec![0; prefixes.len()])?;
        self.model.next_token_log_probs(&rows, prefixes)
    }
}

/// Beam search keeping the `beam_size` best extensions by cumulative
/// log-probability at every step. Extensions ending in eos retire as
/// finished; the search stops when no live hypothesis remains or after
/// `max_len` tokens. All retired and remaining live hypotheses are ranked
/// together by normalized score; a live winner is reported unfinished.
pub fn beam_search(scorer: &mut impl StepScorer, config: &BeamConfig) -> Result<Hypothesis> {
    if config.beam_size == 0 || config.max_len == 0 {
        return Err(Error::Config("beam_size and max_len must be at least 1".into()));
    }
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![BOS], 0.0)];
    let mut pool: Vec<Hypothesis> = Vec::new();
    for _ in 0..config.max_len {
        let prefixes: Vec<Vec<usize>> = live.iter().map(|(p, _)| p.clone()).collect();
        let scores = scorer.log_probs(&prefixes)?;
        let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * scores.first().map_or(0, Vec::len));
        for (h, lp) in scores.iter().enumerate() {
            for (tok, &l) in lp.iter().enumerate() {
                if tok != BOS {
                    candidates.push((live[h].1 + l, h, tok));
                }
            }
        }
        // descending score; ties go to the earlier hypothesis, then lower id
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        candidates.truncate(config.beam_size);
        let mut next = Vec::with_capacity(candidates.len());
        for (total, h, tok) in candidates {
            if tok == EOS {
                pool.push(Hypothesis {
                    tokens: live[h].0[1..].to_vec(),
                    log_prob: total,
                    finished: true,
                });
            } else {
                let mut p = live[h].0.clone();
                p.push(tok);
                next.push((p, total));
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    pool.extend(live.into_iter().map(|(p, lp)| Hypothesis {
        tokens: p[1..].to_vec(),
        log_prob: lp,
        finished: false,
    }));
    let lp = config.length_penalty;
    let mut best = 0;
    for (i, h) in pool.iter().enumerate() {
        if h.score(lp) > pool[best].score(lp) {
            best = i;
        }
    }
    Ok(pool.swap_remove(best))
}

pub fn beam_decode(model: &Transformer, source: &[usize], config: &BeamConfig) -> Result<Hypothesis> {
    config.validate(model.config().max_positions)?;
    beam_search(&mut ModelScorer::new(model, source)?, config)
}

/// Batched argmax decoding; stops each sentence at eos or `max_len`.
pub fn greedy_decode(model: &Transformer, sources: &[Vec<usize>], max_len: usize) -> Result<Vec<Hypothesis>> {
    BeamConfig::greedy(max_len).validate(model.config().max_positions)?;
    let mut out = Vec::with_capacity(sources.len());
    for chunk in sources.chunks(DECODE_CHUNK) {
        let src = SourceBatch::new(chunk, model.config().max_positions)?;
        let encoded = model.encode_batch(&src)?;
        let mut hyps: Vec<Hypothesis> = chunk
            .iter()
            .map(|_| Hypothesis {
                tokens: Vec::new(),
                log_prob: 0.0,
                finished: false,
            })
            .collect();
        let mut live: Vec<usize> = (0..chunk.len()).collect();
        for _ in 0..max_len {
            if live.is_empty() {
                break;
            }
            let prefixes: Vec<Vec<usize>> = live
                .iter()
                .map(|&i| std::iter::once(BOS).chain(hyps[i].tokens.iter().copied()).collect())
                .collect();
            let scores = model.next_token_log_probs(&encoded.select(&live)?, &prefixes)?;
            let mut still = Vec::with_capacity(live.len());
            for (&i, lp) in live.iter().zip(&scores) {
                let mut masked = lp.clone();
                masked[BOS] = f64::NEG_INFINITY;
                let tok = argmax(&masked);
                hyps[i].log_prob += lp[tok];
                if tok == EOS {
                    hyps[i].finished = true;
                } else {
                    hyps[i].tokens.push(tok);
                    still.push(i);
                }
            }
            live = still;
        }
        out.extend(hyps);
    }
    Ok(out)
}

/// Decodes a corpus, taking the batched greedy path when the beam reduces to it.
pub fn decode_corpus(model: &Transformer, sources: &[Vec<usize>], config: &BeamConfig) -> Result<Vec<Hypothesis>> {
    config.validate(model.config().max_positions)?;
    if config.beam_size == 1 {
        return greedy_decode(model, sources, config.max_len);
    }
    sources.iter().map(|s| beam_decode(model, s, config)).collect()
}
