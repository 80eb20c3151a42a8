//! Corpus-level BLEU with clipped n-gram precisions up to 4-grams and the
//! brevity penalty. No smoothing: any zero precision gives a score of 0.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and hypothesis n-gram total, summed over the corpus.
pub fn ngram_precision<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>], n: usize) -> (usize, usize) {
    let mut matched = 0;
    let mut total = 0;
    for (h, r) in hypotheses.iter().zip(references) {
        let rc = ngram_counts(r, n);
        for (gram, c) in ngram_counts(h, n) {
            matched += c.min(rc.get(gram).copied().unwrap_or(0));
            total += c;
        }
    }
    (matched, total)
}

/// BLEU on a 0-100 scale.
pub fn corpus_bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Usage("reference corpus is empty".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Usage(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let c: usize = hypotheses.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=MAX_ORDER {
        let (m, t) = ngram_precision(hypotheses, references, n);
        if m == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(100.0 * bp * (log_sum / MAX_ORDER as f64).exp())
}

/// Percentage of hypotheses equal to their reference.
pub fn sequence_accuracy<T: PartialEq>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if references.is_empty() || hypotheses.len() != references.len() {
        return Err(Error::Usage("sequence accuracy needs equally many, non-zero hypotheses and references".into()));
    }
    let hits = hypotheses.iter().zip(references).filter(|(h, r)| h == r).count();
    Ok(100.0 * hits as f64 / references.len() as f64)
}
