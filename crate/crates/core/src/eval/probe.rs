//! Mean-pooled encoder representations and MLP probing classifiers.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use bliss_tensor::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{argmax, SourceBatch, Transformer};
use crate::seed;
use crate::train::Adam;

const ENCODE_CHUNK: usize = 64;
pub const SELEN_BUCKETS: usize = 6;

/// One vector per sentence: the mean of the encoder states at its token
/// positions (bos, eos and padding excluded).
pub fn extract_representations(model: &Transformer, sentences: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    let e = model.config().d_model;
    let mut out = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(ENCODE_CHUNK) {
        if chunk.iter().any(Vec::is_empty) {
            return Err(Error::Usage("cannot pool an empty sentence".into()));
        }
        let src = SourceBatch::new(chunk, model.config().max_positions)?;
        let enc = model.encode_batch(&src)?;
        for (b, s) in chunk.iter().enumerate() {
            out.push(mean_pool(&enc.memory.data()[b * src.width * e..], 1, s.len(), e));
        }
    }
    Ok(out)
}

/// Mean of rows `start..start + count` of a row-major `[_, e]` buffer.
pub fn mean_pool(rows: &[f64], start: usize, count: usize, e: usize) -> Vec<f64> {
    let mut acc = vec![0.0; e];
    for r in start..start + count {
        for (a, x) in acc.iter_mut().zip(&rows[r * e..(r + 1) * e]) {
            *a += x;
        }
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    acc
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeTask {
    /// Sentence length in equal-mass buckets.
    SeLen,
    /// Whether one adjacent pair of tokens was swapped.
    BShift,
}

impl FromStr for ProbeTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "selen" => Ok(Self::SeLen),
            "bshift" => Ok(Self::BShift),
            other => Err(Error::Config(format!("unknown probe task {other:?} (expected selen or bshift)"))),
        }
    }
}

impl fmt::Display for ProbeTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SeLen => "selen",
            Self::BShift => "bshift",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            lr: 1e-3,
            epochs: 10,
            batch_size: 32,
            train_fraction: 0.8,
            seed: 1,
        }
    }
}

/// Length buckets of roughly equal mass: a length maps to the bucket holding
/// the midpoint of its cumulative-frequency interval.
pub fn length_buckets(lengths: &[usize], buckets: usize) -> Vec<usize> {
    let n = lengths.len() as f64;
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    lengths
        .iter()
        .map(|&l| {
            let below = sorted.partition_point(|&x| x < l) as f64;
            let upto = sorted.partition_point(|&x| x <= l) as f64;
            let mid = (below + upto) / (2.0 * n);
            ((mid * buckets as f64) as usize).min(buckets - 1)
        })
        .collect()
}

/// Sentences and labels for one probing task. For the swap task, half of
/// the sentences (chosen by `seed`) get one adjacent pair of differing
/// tokens swapped and label 1.
pub fn probe_dataset(task: ProbeTask, sentences: &[Vec<usize>], seed: u64) -> (Vec<Vec<usize>>, Vec<usize>) {
    match task {
        ProbeTask::SeLen => {
            let lengths: Vec<usize> = sentences.iter().map(Vec::len).collect();
            (sentences.to_vec(), length_buckets(&lengths, SELEN_BUCKETS))
        }
        ProbeTask::BShift => {
            let mut rng = seed::rng(seed, "probe-bshift");
            let mut order: Vec<usize> = (0..sentences.len()).collect();
            order.shuffle(&mut rng);
            let mut swap = vec![false; sentences.len()];
            for &i in &order[..sentences.len() / 2] {
                swap[i] = true;
            }
            let mut out = Vec::with_capacity(sentences.len());
            let mut labels = Vec::with_capacity(sentences.len());
            for (s, &want) in sentences.iter().zip(&swap) {
                let pairs: Vec<usize> = (0..s.len().saturating_sub(1)).filter(|&j| s[j] != s[j + 1]).collect();
                let mut t = s.clone();
                if want && !pairs.is_empty() {
                    let j = pairs[rng.gen_range(0..pairs.len())];
                    t.swap(j, j + 1);
                    labels.push(1);
                } else {
                    labels.push(0);
                }
                out.push(t);
            }
            (out, labels)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// Validation share of the most frequent training label.
    pub majority_baseline: f64,
    pub train_size: usize,
    pub valid_size: usize,
}

/// Trains a one-hidden-layer ReLU classifier on `features` and reports
/// accuracy on the held-out split.
pub fn probe(features: &[Vec<f64>], labels: &[usize], config: &ProbeConfig) -> Result<ProbeResult> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Usage("probe needs one label per non-empty feature row".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Usage("probe labels contain a single class".into()));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::Usage("probe features must share one positive width".into()));
    }
    if !(config.train_fraction > 0.0 && config.train_fraction < 1.0) || config.hidden == 0 || config.batch_size == 0 {
        return Err(Error::Config("probe needs train_fraction in (0, 1) and positive hidden/batch sizes".into()));
    }
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.shuffle(&mut seed::rng(config.seed, "probe-split"));
    let n_train = ((features.len() as f64 * config.train_fraction).round() as usize).clamp(1, features.len() - 1);
    let (train_idx, valid_idx) = order.split_at(n_train);

    let mut rng = seed::rng(config.seed, "probe-init");
    let mut init = |rows: usize, cols: usize| {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-a..=a))
    };
    let mut params = [
        init(d, config.hidden),
        Tensor::zeros(&[config.hidden]),
        init(config.hidden, classes),
        Tensor::zeros(&[classes]),
    ];
    let mut adam = Adam::new(params.iter().map(|p| p.shape()), 0.9, 0.999, 1e-8);

    let batch_input = |idx: &[usize]| {
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&features[i]);
        }
        Tensor::new(vec![idx.len(), d], data)
    };
    let forward = |g: &mut Graph, params: &[Tensor; 4], x: Tensor, trainable: bool| -> Result<_> {
        let vars = params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(Arc::new(p.clone()))
                } else {
                    g.constant(p.clone())
                }
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let x = g.constant(x)?;
        let h = g.matmul(x, vars[0])?;
        let h = g.add_bias(h, vars[1])?;
        let h = g.relu(h)?;
        let z = g.matmul(h, vars[2])?;
        Ok((g.add_bias(z, vars[3])?, vars))
    };

    let mut shuffle_rng = seed::rng(config.seed, "probe-batches");
    let mut epoch_order = train_idx.to_vec();
    for _ in 0..config.epochs {
        epoch_order.shuffle(&mut shuffle_rng);
        for idx in epoch_order.chunks(config.batch_size) {
            let mut g = Graph::new();
            let (logits, vars) = forward(&mut g, &params, batch_input(idx)?, true)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let loss = g.masked_cross_entropy(logits, &y, &vec![true; y.len()], 0.0)?;
            let mut grads = g.backward(loss)?;
            let grads: Vec<Tensor> = vars
                .iter()
                .zip(&params)
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            let refs: Vec<&[f64]> = grads.iter().map(Tensor::data).collect();
            adam.step(params.iter_mut(), &refs, config.lr, 0.0)?;
        }
    }

    let mut g = Graph::new();
    let (logits, _) = forward(&mut g, &params, batch_input(valid_idx)?, false)?;
    let z = g.value(logits);
    let correct = valid_idx.iter().enumerate().filter(|&(r, &i)| argmax(z.row(r)) == labels[i]).count();
    let mut counts = vec![0usize; classes];
    for &i in train_idx {
        counts[labels[i]] += 1;
    }
    let majority = argmax(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
    let majority_hits = valid_idx.iter().filter(|&&i| labels[i] == majority).count();
    Ok(ProbeResult {
        accuracy: correct as f64 / valid_idx.len() as f64,
        majority_baseline: majority_hits as f64 / valid_idx.len() as f64,
        train_size: train_idx.len(),
        valid_size: valid_idx.len(),
    })
}

/// Builds the task, pools the encoder and probes it.
pub fn probe_model(model: &Transformer, task: ProbeTask, sentences: &[Vec<usize>], config: &ProbeConfig) -> Result<ProbeResult> {
    let (inputs, labels) = probe_dataset(task, sentences, config.seed);
    let features = extract_representations(model, &inputs)?;
    probe(&features, &labels, config)
}
