//! Optimization loop: online augmentation, Adam under the inverse square root
//! warmup schedule, global-norm clipping, metrics logging and resumable
//! checkpoints.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use bliss_tensor::{Graph, Tensor};
use rand::seq::SliceRandom;

use crate::augment::{self, AugmentConfig, AugmentMode, PerturbationOutcome, Supervision};
use crate::checkpoint::Checkpoint;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{LossOutput, ModelConfig, TrainBatch, Transformer};
use crate::seed;

pub const METRICS_HEADER: &str = "step,lr,loss_total,loss_nll,loss_token,loss_pos,token_head_acc,pos_head_acc";

/// Learning rate at 1-based `step`:
/// `factor · e^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr_at(step: u64, d_model: usize, warmup: u64, factor: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Usage("learning-rate steps count from 1".into()));
    }
    if warmup == 0 {
        return Err(Error::Usage("warmup must be at least 1".into()));
    }
    let s = step as f64;
    Ok(factor * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Ablation {
    pub no_aug: bool,
    pub no_smooth: bool,
    pub no_token: bool,
    pub no_pos: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub max_steps: u64,
    pub batch_size: usize,
    pub warmup: u64,
    pub lr_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Drives initialization, batch order, dropout and augmentation
    /// (`augment.seed` is overridden).
    pub seed: u64,
    pub ablation: Ablation,
    pub checkpoint_path: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    /// Also checkpoint every this many steps; 0 means only at the end.
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
            max_steps: 5000,
            batch_size: 32,
            warmup: 400,
            lr_factor: 2.0,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            clip_norm: 1.0,
            seed: 1,
            ablation: Ablation::default(),
            checkpoint_path: None,
            metrics_path: None,
            checkpoint_every: 0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        self.model.validate()?;
        if self.warmup == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("warmup, batch_size and log_every must be at least 1".into()));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor.is_finite()) {
            return Err(Error::Config(format!("lr_factor must be positive, got {}", self.lr_factor)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config(format!("clip_norm must be non-negative, got {}", self.clip_norm)));
        }
        Ok(())
    }

    /// Augmentation settings after the ablation switches and seed override.
    pub fn effective_augment(&self) -> AugmentConfig {
        let mut a = self.augment.clone();
        a.seed = self.seed;
        if self.ablation.no_aug {
            a.no_aug = true;
            a.mode = AugmentMode::None;
        }
        if self.ablation.no_smooth {
            a.no_smooth = true;
        }
        a
    }

    /// Model settings after the ablation switches.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if self.ablation.no_aug || self.ablation.no_token {
            m.lambda_token = 0.0;
        }
        if self.ablation.no_aug || self.ablation.no_pos {
            m.lambda_pos = 0.0;
        }
        m
    }
}

/// Bias-corrected Adam moments for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    /// Factor applied to the gradients by clipping (1 when unclipped).
    pub clip_scale: f64,
}

impl Adam {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m: Vec<Tensor> = shapes.into_iter().map(Tensor::zeros).collect();
        Self {
            beta1,
            beta2,
            eps,
            v: m.clone(),
            m,
            step: 0,
        }
    }

    /// One update with global-norm clipping to `clip` (0 disables it).
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: &[&[f64]],
        lr: f64,
        clip: f64,
    ) -> Result<StepInfo> {
        if grads.len() != self.m.len() {
            return Err(Error::Usage(format!("expected {} gradients, got {}", self.m.len(), grads.len())));
        }
        let norm = grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence {
                step: self.step + 1,
                detail: format!("gradient norm is {norm}"),
            });
        }
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut count = 0;
        for (i, p) in params.into_iter().enumerate() {
            if i >= grads.len() || p.len() != grads[i].len() {
                return Err(Error::Usage(format!("parameter {i} does not match its gradient")));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i][k] * scale;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
            count += 1;
        }
        if count != grads.len() {
            return Err(Error::Usage(format!("expected {} parameters, got {count}", grads.len())));
        }
        Ok(StepInfo {
            grad_norm: norm,
            clip_scale: scale,
        })
    }
}

/// One row of the metrics log; losses and accuracies are window means.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_nll: f64,
    pub loss_token: f64,
    pub loss_pos: f64,
    pub token_head_acc: f64,
    pub pos_head_acc: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.lr,
            self.loss_total,
            self.loss_nll,
            self.loss_token,
            self.loss_pos,
            self.token_head_acc,
            self.pos_head_acc
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Usage(format!("malformed metrics row {line:?}"));
        if f.len() != 8 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            lr: num(1)?,
            loss_total: num(2)?,
            loss_nll: num(3)?,
            loss_token: num(4)?,
            loss_pos: num(5)?,
            token_head_acc: num(6)?,
            pos_head_acc: num(7)?,
        })
    }
}

pub fn load_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Usage(format!("{} lacks the metrics header", path.display())));
    }
    lines.map(MetricsRow::parse).collect()
}

/// Running sums between two metrics rows.
#[derive(Clone, Debug, Default, PartialEq)]
struct Window {
    steps: u64,
    total: f64,
    nll: f64,
    token_loss: f64,
    token_steps: u64,
    pos_loss: f64,
    pos_steps: u64,
    token_correct: u64,
    token_count: u64,
    pos_correct: u64,
    pos_count: u64,
}

impl Window {
    fn add(&mut self, out: &LossOutput) {
        self.steps += 1;
        self.total += out.total_value;
        self.nll += out.nll;
        if out.token.count > 0 {
            self.token_loss += out.token.loss;
            self.token_steps += 1;
        }
        if out.pos.count > 0 {
            self.pos_loss += out.pos.loss;
            self.pos_steps += 1;
        }
        self.token_correct += out.token.correct as u64;
        self.token_count += out.token.count as u64;
        self.pos_correct += out.pos.correct as u64;
        self.pos_count += out.pos.count as u64;
    }

    fn row(&self, step: u64, lr: f64) -> MetricsRow {
        let mean = |s: f64, n: u64| if n == 0 { 0.0 } else { s / n as f64 };
        let ratio = |a: u64, n: u64| if n == 0 { f64::NAN } else { a as f64 / n as f64 };
        MetricsRow {
            step,
            lr,
            loss_total: mean(self.total, self.steps),
            loss_nll: mean(self.nll, self.steps),
            loss_token: mean(self.token_loss, self.token_steps),
            loss_pos: mean(self.pos_loss, self.pos_steps),
            token_head_acc: ratio(self.token_correct, self.token_count),
            pos_head_acc: ratio(self.pos_correct, self.pos_count),
        }
    }

    fn encode(&self) -> String {
        let f = [self.total, self.nll, self.token_loss, self.pos_loss].map(|x| format!("{:016x}", x.to_bits()));
        let n = [
            self.steps,
            self.token_steps,
            self.pos_steps,
            self.token_correct,
            self.token_count,
            self.pos_correct,
            self.pos_count,
        ]
        .map(|x| x.to_string());
        [f.join(","), n.join(",")].join(";")
    }

    fn decode(s: &str) -> Result<Self> {
        let bad = || Error::Checkpoint(format!("bad metrics window {s:?}"));
        let (f, n) = s.split_once(';').ok_or_else(bad)?;
        let f = f
            .split(',')
            .map(|x| u64::from_str_radix(x, 16).map(f64::from_bits).map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        let n = n.split(',').map(|x| x.parse::<u64>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?;
        if f.len() != 4 || n.len() != 7 {
            return Err(bad());
        }
        Ok(Self {
            total: f[0],
            nll: f[1],
            token_loss: f[2],
            pos_loss: f[3],
            steps: n[0],
            token_steps: n[1],
            pos_steps: n[2],
            token_correct: n[3],
            token_count: n[4],
            pos_correct: n[5],
            pos_count: n[6],
        })
    }
}

/// Everything needed to continue training bit-identically.
#[derive(Clone)]
pub struct TrainState {
    pub model: Transformer,
    pub adam: Adam,
    window: Window,
}

impl TrainState {
    pub fn fresh(config: &TrainConfig) -> Result<Self> {
        let model = Transformer::new(config.effective_model(), config.seed)?;
        let adam = Adam::new(model.params().iter().map(|p| p.shape()), config.beta1, config.beta2, config.adam_eps);
        Ok(Self {
            model,
            adam,
            window: Window::default(),
        })
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        ck.meta.push(("train.step".into(), self.adam.step.to_string()));
        ck.meta.push(("train.window".into(), self.window.encode()));
        for (name, (m, v)) in self.model.param_names().iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
            ck.tensors.push((format!("adam.m.{name}"), m.clone()));
            ck.tensors.push((format!("adam.v.{name}"), v.clone()));
        }
        ck
    }

    /// Restores a state written by [`TrainState::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint, config: &TrainConfig) -> Result<Self> {
        let model = Transformer::from_checkpoint(ck)?;
        if model.config() != &config.effective_model() {
            return Err(Error::Checkpoint("checkpoint model configuration differs from the run".into()));
        }
        let step = ck
            .meta_value("train.step")
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?
            .parse::<u64>()
            .map_err(|_| Error::Checkpoint("bad train.step".into()))?;
        let window = Window::decode(ck.meta_value("train.window").unwrap_or(""))?;
        let mut adam = Adam::new(model.params().iter().map(|p| p.shape()), config.beta1, config.beta2, config.adam_eps);
        adam.step = step;
        for (i, name) in model.param_names().iter().enumerate() {
            for (slot, kind) in [(&mut adam.m[i], "m"), (&mut adam.v[i], "v")] {
                let t = ck
                    .tensor(&format!("adam.{kind}.{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing adam.{kind}.{name}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!("adam.{kind}.{name} has the wrong shape")));
                }
                *slot = t.clone();
            }
        }
        Ok(Self { model, adam, window })
    }
}

/// Deterministic sample order: a fresh seeded permutation per epoch.
struct Order {
    seed: u64,
    len: usize,
    epoch: u64,
    perm: Vec<usize>,
}

impl Order {
    fn new(seed: u64, len: usize) -> Self {
        Self {
            seed,
            len,
            epoch: u64::MAX,
            perm: Vec::new(),
        }
    }

    /// `(epoch, sample index)` of the `cursor`-th drawn sample.
    fn at(&mut self, cursor: u64) -> (u64, usize) {
        let epoch = cursor / self.len as u64;
        if epoch != self.epoch {
            self.perm = (0..self.len).collect();
            self.perm.shuffle(&mut seed::rng_indexed(self.seed, "order", epoch));
            self.epoch = epoch;
        }
        (epoch, self.perm[(cursor % self.len as u64) as usize])
    }
}

/// Sources, supervision and targets for training step `step` (0-based).
pub fn make_batch(
    config: &TrainConfig,
    augment: &AugmentConfig,
    corpus: &[Sample],
    step: u64,
) -> Result<TrainBatch> {
    make_batch_with(config, augment, corpus, step, &mut Order::new(config.seed, corpus.len()))
}

fn make_batch_with(
    config: &TrainConfig,
    augment: &AugmentConfig,
    corpus: &[Sample],
    step: u64,
    order: &mut Order,
) -> Result<TrainBatch> {
    let model = &config.model;
    let mut sources = Vec::with_capacity(config.batch_size);
    let mut targets = Vec::with_capacity(config.batch_size);
    let mut supervision = Vec::with_capacity(config.batch_size);
    for i in 0..config.batch_size {
        let (epoch, index) = order.at(step * config.batch_size as u64 + i as u64);
        let sample = &corpus[index];
        let outcome = if augment.no_aug || augment.mode == AugmentMode::None {
            PerturbationOutcome::identity(&sample.source)
        } else {
            let mut rng = augment::sentence_rng(augment.seed, epoch, index as u64);
            augment::augment_sentence(&sample.source, model.vocab_size, augment, &mut rng)
        };
        let sup = if augment.supervises() {
            augment::build_supervision(
                &outcome,
                outcome.perturbed.len(),
                model.max_positions,
                augment.token_loss_replaced_only,
            )?
        } else {
            Supervision::empty(outcome.perturbed.len())
        };
        sources.push(outcome.perturbed);
        targets.push(sample.target.as_slice());
        supervision.push(sup);
    }
    TrainBatch::new(&sources, &targets, supervision, model.max_positions)
}

pub struct TrainReport {
    pub state: TrainState,
    pub metrics: Vec<MetricsRow>,
}

impl TrainReport {
    pub fn model(&self) -> &Transformer {
        &self.state.model
    }
}

fn validate_corpus(config: &TrainConfig, corpus: &[Sample]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Usage("training corpus is empty".into()));
    }
    let v = config.model.vocab_size;
    for (i, s) in corpus.iter().enumerate() {
        if s.source.is_empty() || s.target.is_empty() {
            return Err(Error::Usage(format!("sample {i} has an empty side")));
        }
        if let Some(&bad) = s.source.iter().chain(&s.target).find(|&&t| t >= v) {
            return Err(Error::Usage(format!("sample {i} holds id {bad} outside the vocabulary of {v}")));
        }
    }
    Ok(())
}

fn write_checkpoint(state: &TrainState, path: Option<&Path>) -> Result<()> {
    if let Some(p) = path {
        state.to_checkpoint().save(p)?;
    }
    Ok(())
}

/// Opens the metrics log, keeping rows up to `step` when resuming.
fn open_metrics(path: &Path, resume_step: u64) -> Result<(BufWriter<fs::File>, Vec<MetricsRow>)> {
    let kept = if resume_step > 0 && path.exists() {
        load_metrics(path)?.into_iter().filter(|r| r.step <= resume_step).collect()
    } else {
        Vec::new()
    };
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{METRICS_HEADER}")?;
    for r in &kept {
        writeln!(w, "{}", r.to_csv())?;
    }
    w.flush()?;
    Ok((w, kept))
}

/// Trains from scratch.
pub fn train(config: &TrainConfig, corpus: &[Sample]) -> Result<TrainReport> {
    train_from(config, corpus, TrainState::fresh(config)?)
}

/// Continues training `state` up to `config.max_steps`.
pub fn train_from(config: &TrainConfig, corpus: &[Sample], mut state: TrainState) -> Result<TrainReport> {
    config.validate()?;
    validate_corpus(config, corpus)?;
    let augment = config.effective_augment();
    let mut order = Order::new(config.seed, corpus.len());
    let (mut log, mut metrics) = match &config.metrics_path {
        Some(p) => {
            let (w, rows) = open_metrics(p, state.step())?;
            (Some(w), rows)
        }
        None => (None, Vec::new()),
    };
    let e = state.model.config().d_model;
    while state.step() < config.max_steps {
        let step = state.step();
        let batch = make_batch_with(config, &augment, corpus, step, &mut order)?;
        let mut g = Graph::new();
        let bound = state.model.bind(&mut g, true)?;
        let mut drop_rng = seed::rng_indexed(config.seed, "dropout", step);
        let out = state
            .model
            .bliss_loss(&mut g, &bound, &batch, &mut Some(&mut drop_rng))
            .map_err(|err| match err {
                Error::Divergence { detail, .. } => Error::Divergence { step: step + 1, detail },
                other => other,
            })?;
        let mut grads = g.backward(out.total)?;
        let grads: Vec<Tensor> = bound
            .vars
            .iter()
            .zip(state.model.params())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        let grad_refs: Vec<&[f64]> = grads.iter().map(Tensor::data).collect();
        let lr = lr_at(step + 1, e, config.warmup, config.lr_factor)?;
        state.adam.step(state.model.params_mut(), &grad_refs, lr, config.clip_norm)?;
        drop(g);
        state.window.add(&out);
        let done = state.step();
        if done % config.log_every == 0 {
            let row = state.window.row(done, lr);
            log::info!(
                "step {done} lr {:.3e} loss {:.4} nll {:.4} token {:.4} pos {:.4}",
                row.lr,
                row.loss_total,
                row.loss_nll,
                row.loss_token,
                row.loss_pos
            );
            if let Some(w) = log.as_mut() {
                writeln!(w, "{}", row.to_csv())?;
                w.flush()?;
            }
            metrics.push(row);
            state.window = Window::default();
        }
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.max_steps {
            write_checkpoint(&state, config.checkpoint_path.as_deref())?;
        }
    }
    write_checkpoint(&state, config.checkpoint_path.as_deref())?;
    Ok(TrainReport { state, metrics })
}
