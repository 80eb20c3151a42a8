//! Layered `key = value` settings: built-in defaults, then an optional
//! config file, then command-line flags.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use bliss_core::augment::{AugmentConfig, AugmentMode};
use bliss_core::data::{CorpusSpec, TaskKind};
use bliss_core::eval::{BeamConfig, NoiseKind, ProbeConfig, ProbeTask};
use bliss_core::model::ModelConfig;
use bliss_core::train::{Ablation, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Corpus,
    Augment,
    Model,
    Train,
    Beam,
    Noise,
    Probe,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::Corpus,
        Group::Augment,
        Group::Model,
        Group::Train,
        Group::Beam,
        Group::Noise,
        Group::Probe,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Group::Corpus => "corpus",
            Group::Augment => "augment",
            Group::Model => "model",
            Group::Train => "train",
            Group::Beam => "beam",
            Group::Noise => "noise",
            Group::Probe => "probe",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub help: &'static str,
    pub flag: bool,
}

/// Every known key with its current value, in a stable order.
#[derive(Clone, Debug)]
pub struct Settings {
    entries: Vec<Entry>,
}

fn entry(key: &str, value: impl ToString, help: &'static str) -> Entry {
    Entry {
        key: key.to_string(),
        value: value.to_string(),
        help,
        flag: false,
    }
}

fn switch(key: &str, value: bool, help: &'static str) -> Entry {
    Entry {
        flag: true,
        ..entry(key, value, help)
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl Default for Settings {
    fn default() -> Self {
        let corpus = CorpusSpec::default();
        let augment = AugmentConfig::default();
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let beam = BeamConfig::default();
        let probe = ProbeConfig::default();
        let mut entries = vec![
            entry("seed", 1, "master seed; every random stream is derived from it"),
            entry("threads", 1, "worker threads"),
            entry("corpus.task", corpus.task, "copy, reverse or toy-translation"),
            entry("corpus.vocab_size", corpus.vocab_size, "vocabulary size including the five specials"),
            entry("corpus.min_len", corpus.min_len, "shortest source sentence"),
            entry("corpus.max_len", corpus.max_len, "longest source sentence"),
            entry("corpus.samples", corpus.samples, "number of samples in the main corpus"),
            entry("corpus.test_samples", 0, "extra samples split off as a test corpus"),
            entry("corpus.max_positions", corpus.max_positions, "position limit that sentences must fit"),
            entry("augment.mode", augment.mode, "none, bliss, dropout, blank or shuffle-baseline"),
            entry("augment.gamma", augment.gamma, "per-function probability of perturbing a sentence"),
            entry("augment.alpha_shuffle", augment.alpha_shuffle, "cap on the shuffled fraction"),
            entry("augment.alpha_replace", augment.alpha_replace, "cap on the replaced fraction"),
            entry("augment.p", augment.p, "geometric parameter of the perturbation count"),
            entry("augment.window", augment.window, "shuffle window"),
            switch(
                "augment.token_loss_replaced_only",
                augment.token_loss_replaced_only,
                "supervise the token head on replaced positions only",
            ),
        ];
        for (key, value) in model.to_pairs() {
            let help = match key.as_str() {
                "model.d_model" => "model width",
                "model.n_layers" => "encoder and decoder layers",
                "model.n_heads" => "attention heads",
                "model.d_ffn" => "feed-forward width",
                "model.vocab_size" => "vocabulary size including specials",
                "model.max_positions" => "maximum source length and position classes",
                "model.dropout" => "dropout rate",
                "model.label_smoothing" => "label smoothing of the translation loss",
                "model.lambda_token" => "weight of the token reconstruction loss",
                "model.lambda_pos" => "weight of the position reconstruction loss",
                _ => "",
            };
            entries.push(entry(&key, value, help));
        }
        entries.extend([
            entry("train.max_steps", train.max_steps, "optimizer steps"),
            entry("train.batch_size", train.batch_size, "sentences per batch"),
            entry("train.warmup", train.warmup, "warmup steps of the learning-rate schedule"),
            entry("train.lr_factor", train.lr_factor, "learning-rate scale"),
            entry("train.beta1", train.beta1, "Adam beta1"),
            entry("train.beta2", train.beta2, "Adam beta2"),
            entry("train.adam_eps", train.adam_eps, "Adam epsilon"),
            entry("train.clip_norm", train.clip_norm, "global gradient-norm clip, 0 disables"),
            entry("train.checkpoint_every", train.checkpoint_every, "extra checkpoint interval, 0 for end only"),
            entry("train.log_every", train.log_every, "metrics row interval"),
            switch("train.no_aug", false, "ablation: no augmentation and no auxiliary losses"),
            switch("train.no_smooth", false, "ablation: always perturb the maximum count"),
            switch("train.no_token", false, "ablation: drop the token loss"),
            switch("train.no_pos", false, "ablation: drop the position loss"),
            entry("beam.beam_size", beam.beam_size, "beam width, 1 decodes greedily"),
            entry("beam.length_penalty", beam.length_penalty, "length normalization exponent"),
            entry("beam.max_len", beam.max_len, "maximum output length"),
            entry("noise.kinds", "shuffle-span,replace", "comma-separated noise kinds"),
            entry("noise.ratios", join(&bliss_core::eval::noise::NOISE_RATIOS), "comma-separated noise ratios"),
            entry("probe.task", ProbeTask::BShift, "selen or bshift"),
            entry("probe.hidden", probe.hidden, "probe hidden width"),
            entry("probe.lr", probe.lr, "probe learning rate"),
            entry("probe.epochs", probe.epochs, "probe epochs"),
            entry("probe.batch_size", probe.batch_size, "probe batch size"),
            entry("probe.train_fraction", probe.train_fraction, "share of sentences used for probe training"),
        ]);
        Self { entries }
    }
}

impl Settings {
    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    /// Keys shown and accepted as flags for a command using `groups`.
    pub fn keys_for<'a>(&'a self, groups: &'a [Group]) -> impl Iterator<Item = &'a Entry> + 'a {
        self.entries.iter().filter(move |e| match e.key.split_once('.') {
            None => true,
            Some((prefix, _)) => groups.iter().any(|g| g.prefix() == prefix),
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let e = self
            .entries
            .iter_mut()
            .find(|e| e.key == key)
            .ok_or_else(|| anyhow!("unknown setting {key:?}"))?;
        e.value = value.trim().to_string();
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        &self
            .entries
            .iter()
            .find(|e| e.key == key)
            .unwrap_or_else(|| panic!("setting {key} is not registered"))
            .value
    }

    pub fn get<T>(&self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse().map_err(|e| anyhow!("invalid value {raw:?} for {key}: {e}"))
    }

    fn list<T>(&self, key: &str) -> Result<Vec<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| anyhow!("invalid item {s:?} in {key}: {e}")))
            .collect()
    }

    /// Applies a `key = value` file; `#` starts a comment.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}:{}: expected `key = value`", path.display(), i + 1))?;
            self.set(key.trim(), value).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        }
        Ok(())
    }

    /// The settings a command uses, in config-file syntax.
    pub fn render(&self, command: &str, groups: &[Group], paths: &[(&str, String)]) -> String {
        let mut out = format!("# resolved configuration for `bliss {command}`\n");
        for e in self.keys_for(groups) {
            let _ = writeln!(out, "{} = {}", e.key, e.value);
        }
        for (name, value) in paths {
            let _ = writeln!(out, "# {name}: {value}");
        }
        out
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn corpus_spec(&self) -> Result<CorpusSpec> {
        let spec = CorpusSpec {
            task: self.get("corpus.task")?,
            vocab_size: self.get("corpus.vocab_size")?,
            min_len: self.get("corpus.min_len")?,
            max_len: self.get("corpus.max_len")?,
            samples: self.get("corpus.samples")?,
            seed: self.seed()?,
            max_positions: self.get("corpus.max_positions")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn task(&self) -> Result<TaskKind> {
        self.get("corpus.task")
    }

    pub fn augment(&self) -> Result<AugmentConfig> {
        let config = AugmentConfig {
            mode: self.get::<AugmentMode>("augment.mode")?,
            gamma: self.get("augment.gamma")?,
            alpha_shuffle: self.get("augment.alpha_shuffle")?,
            alpha_replace: self.get("augment.alpha_replace")?,
            p: self.get("augment.p")?,
            window: self.get("augment.window")?,
            token_loss_replaced_only: self.get("augment.token_loss_replaced_only")?,
            seed: self.seed()?,
            ..AugmentConfig::default()
        };
        config.validate()?;
        Ok(config)
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let mut config = ModelConfig::default();
        for e in self.entries.iter().filter(|e| e.key.starts_with("model.")) {
            config.set(&e.key, &e.value)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let config = TrainConfig {
            augment: self.augment()?,
            model: self.model()?,
            max_steps: self.get("train.max_steps")?,
            batch_size: self.get("train.batch_size")?,
            warmup: self.get("train.warmup")?,
            lr_factor: self.get("train.lr_factor")?,
            beta1: self.get("train.beta1")?,
            beta2: self.get("train.beta2")?,
            adam_eps: self.get("train.adam_eps")?,
            clip_norm: self.get("train.clip_norm")?,
            seed: self.seed()?,
            ablation: Ablation {
                no_aug: self.get("train.no_aug")?,
                no_smooth: self.get("train.no_smooth")?,
                no_token: self.get("train.no_token")?,
                no_pos: self.get("train.no_pos")?,
            },
            checkpoint_path: None,
            metrics_path: None,
            checkpoint_every: self.get("train.checkpoint_every")?,
            log_every: self.get("train.log_every")?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn beam(&self) -> Result<BeamConfig> {
        Ok(BeamConfig {
            beam_size: self.get("beam.beam_size")?,
            length_penalty: self.get("beam.length_penalty")?,
            max_len: self.get("beam.max_len")?,
        })
    }

    pub fn noise_kinds(&self) -> Result<Vec<NoiseKind>> {
        let kinds = self.list("noise.kinds")?;
        if kinds.is_empty() {
            bail!("noise.kinds is empty");
        }
        Ok(kinds)
    }

    pub fn noise_ratios(&self) -> Result<Vec<f64>> {
        let ratios: Vec<f64> = self.list("noise.ratios")?;
        if ratios.is_empty() || ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            bail!("noise.ratios must be a non-empty list of values in [0, 1]");
        }
        Ok(ratios)
    }

    pub fn probe_task(&self) -> Result<ProbeTask> {
        self.get("probe.task")
    }

    pub fn probe(&self) -> Result<ProbeConfig> {
        Ok(ProbeConfig {
            hidden: self.get("probe.hidden")?,
            lr: self.get("probe.lr")?,
            epochs: self.get("probe.epochs")?,
            batch_size: self.get("probe.batch_size")?,
            train_fraction: self.get("probe.train_fraction")?,
            seed: self.seed()?,
        })
    }
}
