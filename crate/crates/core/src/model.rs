//! Post-LN Transformer encoder-decoder with tied embeddings, the token and
//! position heads over encoder states, and the combined training objective.

use std::sync::Arc;

use bliss_tensor::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::augment::Supervision;
use crate::checkpoint::Checkpoint;
use crate::data::{BOS, DEFAULT_MAX_POSITIONS, EOS, PAD};
use crate::error::{Error, Result};
use crate::seed;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub lambda_token: f64,
    pub lambda_pos: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 128,
            vocab_size: 205,
            max_positions: DEFAULT_MAX_POSITIONS,
            dropout: 0.1,
            label_smoothing: 0.1,
            lambda_token: 0.005,
            lambda_pos: 0.005,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ffn == 0 {
            return fail("model dimensions must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.vocab_size <= crate::data::NUM_SPECIALS {
            return fail(format!("vocab_size {} leaves no content tokens", self.vocab_size));
        }
        if self.max_positions < 3 {
            return fail(format!("max_positions {} is too small", self.max_positions));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing must be in [0, 1), got {}", self.label_smoothing));
        }
        if !(self.lambda_token >= 0.0 && self.lambda_pos >= 0.0) || !self.lambda_token.is_finite() || !self.lambda_pos.is_finite() {
            return fail("lambda weights must be finite and non-negative".into());
        }
        Ok(())
    }

    /// `key=value` pairs under the `model.` prefix, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("d_model", self.d_model.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_ffn", self.d_ffn.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("max_positions", self.max_positions.to_string()),
            ("dropout", self.dropout.to_string()),
            ("label_smoothing", self.label_smoothing.to_string()),
            ("lambda_token", self.lambda_token.to_string()),
            ("lambda_pos", self.lambda_pos.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("model.{k}"), v))
        .collect()
    }

    /// Applies one `model.*` key; returns false for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
        }
        let Some(field) = key.strip_prefix("model.") else {
            return Ok(false);
        };
        match field {
            "d_model" => self.d_model = parse(key, value)?,
            "n_layers" => self.n_layers = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "d_ffn" => self.d_ffn = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "max_positions" => self.max_positions = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "label_smoothing" => self.label_smoothing = parse(key, value)?,
            "lambda_token" => self.lambda_token = parse(key, value)?,
            "lambda_pos" => self.lambda_pos = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut config = Self::default();
        let mut seen = 0;
        for (k, v) in pairs {
            if config.set(k, v)? {
                seen += 1;
            }
        }
        if seen < 10 {
            return Err(Error::Checkpoint(format!("model configuration incomplete ({seen} of 10 keys)")));
        }
        config.validate()?;
        Ok(config)
    }
}

/// Sinusoidal encodings for positions `0..len`, `[len, e]` row-major.
pub fn sinusoidal_positions(len: usize, e: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * e];
    for pos in 0..len {
        for i in 0..e {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / e as f64);
            out[pos * e + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    attn: Attention,
    ln1: Norm,
    ff1: Linear,
    ff2: Linear,
    ln2: Norm,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    self_attn: Attention,
    ln1: Norm,
    cross: Attention,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
    ln3: Norm,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: usize,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    head_token: usize,
    head_pos: usize,
}

enum Init {
    Xavier,
    Uniform(f64),
    Zeros,
    Ones,
}

#[derive(Default)]
struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.push(format!("{prefix}.w"), vec![fan_in, fan_out], Init::Xavier),
            b: self.push(format!("{prefix}.b"), vec![fan_out], Init::Zeros),
        }
    }

    fn norm(&mut self, prefix: &str, e: usize) -> Norm {
        Norm {
            g: self.push(format!("{prefix}.gain"), vec![e], Init::Ones),
            b: self.push(format!("{prefix}.bias"), vec![e], Init::Zeros),
        }
    }

    fn attention(&mut self, prefix: &str, e: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{prefix}.q"), e, e),
            k: self.linear(&format!("{prefix}.k"), e, e),
            v: self.linear(&format!("{prefix}.v"), e, e),
            o: self.linear(&format!("{prefix}.o"), e, e),
        }
    }
}

fn build_layout(c: &ModelConfig) -> (Layout, Builder) {
    let e = c.d_model;
    let mut b = Builder::default();
    let embed = b.push("embed".into(), vec![c.vocab_size, e], Init::Uniform((3.0 / e as f64).sqrt()));
    let encoder = (0..c.n_layers)
        .map(|l| {
            let p = format!("enc.{l}");
            EncoderLayer {
                attn: b.attention(&format!("{p}.attn"), e),
                ln1: b.norm(&format!("{p}.ln1"), e),
                ff1: b.linear(&format!("{p}.ffn1"), e, c.d_ffn),
                ff2: b.linear(&format!("{p}.ffn2"), c.d_ffn, e),
                ln2: b.norm(&format!("{p}.ln2"), e),
            }
        })
        .collect();
    let decoder = (0..c.n_layers)
        .map(|l| {
            let p = format!("dec.{l}");
            DecoderLayer {
                self_attn: b.attention(&format!("{p}.self"), e),
                ln1: b.norm(&format!("{p}.ln1"), e),
                cross: b.attention(&format!("{p}.cross"), e),
                ln2: b.norm(&format!("{p}.ln2"), e),
                ff1: b.linear(&format!("{p}.ffn1"), e, c.d_ffn),
                ff2: b.linear(&format!("{p}.ffn2"), c.d_ffn, e),
                ln3: b.norm(&format!("{p}.ln3"), e),
            }
        })
        .collect();
    // std 0.5/sqrt(e): initial head logits have variance about 0.25
    let head_bound = 0.5 * (3.0 / e as f64).sqrt();
    let head_token = b.push("head.token".into(), vec![e, c.vocab_size], Init::Uniform(head_bound));
    let head_pos = b.push("head.pos".into(), vec![e, c.max_positions], Init::Uniform(head_bound));
    (
        Layout {
            embed,
            encoder,
            decoder,
            head_token,
            head_pos,
        },
        b,
    )
}

/// Source sentences wrapped as `<bos> x <eos>` and right-padded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceBatch {
    pub ids: Vec<usize>,
    /// Unpadded lengths including bos and eos.
    pub lens: Vec<usize>,
    pub width: usize,
}

impl SourceBatch {
    pub fn new<S: AsRef<[usize]>>(sentences: &[S], max_positions: usize) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::Usage("empty source batch".into()));
        }
        let lens: Vec<usize> = sentences.iter().map(|s| s.as_ref().len() + 2).collect();
        let width = *lens.iter().max().expect("non-empty");
        if width > max_positions {
            return Err(Error::TooLong {
                len: width,
                limit: max_positions,
            });
        }
        let mut ids = vec![PAD; sentences.len() * width];
        for (b, s) in sentences.iter().enumerate() {
            let row = &mut ids[b * width..];
            row[0] = BOS;
            row[1..=s.as_ref().len()].copy_from_slice(s.as_ref());
            row[s.as_ref().len() + 1] = EOS;
        }
        Ok(Self { ids, lens, width })
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }
}

/// Teacher-forcing inputs `<bos> y` and labels `y <eos>`, right-padded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetBatch {
    pub inputs: Vec<usize>,
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
    pub lens: Vec<usize>,
    pub width: usize,
}

impl TargetBatch {
    pub fn new<S: AsRef<[usize]>>(targets: &[S], max_positions: usize) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Usage("empty target batch".into()));
        }
        let lens: Vec<usize> = targets.iter().map(|t| t.as_ref().len() + 1).collect();
        let width = *lens.iter().max().expect("non-empty");
        if width > max_positions {
            return Err(Error::TooLong {
                len: width,
                limit: max_positions,
            });
        }
        let n = targets.len() * width;
        let (mut inputs, mut labels, mut mask) = (vec![PAD; n], vec![PAD; n], vec![false; n]);
        for (b, t) in targets.iter().enumerate() {
            let t = t.as_ref();
            let o = b * width;
            inputs[o] = BOS;
            inputs[o + 1..o + 1 + t.len()].copy_from_slice(t);
            labels[o..o + t.len()].copy_from_slice(t);
            labels[o + t.len()] = EOS;
            mask[o..=o + t.len()].iter_mut().for_each(|m| *m = true);
        }
        Ok(Self {
            inputs,
            labels,
            mask,
            lens,
            width,
        })
    }

    /// Decoder inputs for arbitrary prefixes (each starting with bos), no labels.
    pub fn from_prefixes(prefixes: &[Vec<usize>], max_positions: usize) -> Result<Self> {
        let lens: Vec<usize> = prefixes.iter().map(Vec::len).collect();
        let width = lens.iter().copied().max().unwrap_or(0);
        if width == 0 {
            return Err(Error::Usage("empty decoder prefix".into()));
        }
        if width > max_positions {
            return Err(Error::TooLong {
                len: width,
                limit: max_positions,
            });
        }
        let mut inputs = vec![PAD; prefixes.len() * width];
        for (b, p) in prefixes.iter().enumerate() {
            inputs[b * width..b * width + p.len()].copy_from_slice(p);
        }
        let n = inputs.len();
        Ok(Self {
            inputs,
            labels: vec![PAD; n],
            mask: vec![false; n],
            lens,
            width,
        })
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }
}

/// One training batch: perturbed sources, clean targets, head supervision per
/// sentence (indexed by position in the perturbed source, before bos).
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub source: SourceBatch,
    pub target: TargetBatch,
    pub supervision: Vec<Supervision>,
}

impl TrainBatch {
    pub fn new<S: AsRef<[usize]>, T: AsRef<[usize]>>(
        sources: &[S],
        targets: &[T],
        supervision: Vec<Supervision>,
        max_positions: usize,
    ) -> Result<Self> {
        if sources.len() != targets.len() || sources.len() != supervision.len() {
            return Err(Error::Usage(format!(
                "batch parts disagree: {} sources, {} targets, {} supervision rows",
                sources.len(),
                targets.len(),
                supervision.len()
            )));
        }
        for (s, sup) in sources.iter().zip(&supervision) {
            let n = s.as_ref().len();
            if sup.token_mask.len() != n || sup.pos_mask.len() != n {
                return Err(Error::Usage("supervision length differs from its source".into()));
            }
        }
        Ok(Self {
            source: SourceBatch::new(sources, max_positions)?,
            target: TargetBatch::new(targets, max_positions)?,
            supervision,
        })
    }
}

/// Per-head rows gathered from the encoder output.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HeadTargets {
    pub token_rows: Vec<usize>,
    pub token_labels: Vec<usize>,
    pub pos_rows: Vec<usize>,
    pub pos_labels: Vec<usize>,
}

impl HeadTargets {
    /// Maps sentence-local supervision to encoder rows (shifted past bos).
    pub fn from_supervision(supervision: &[Supervision], width: usize) -> Self {
        let mut t = Self::default();
        for (b, sup) in supervision.iter().enumerate() {
            for j in 0..sup.token_mask.len() {
                let row = b * width + j + 1;
                if sup.token_mask[j] {
                    t.token_rows.push(row);
                    t.token_labels.push(sup.token_labels[j]);
                }
                if sup.pos_mask[j] {
                    t.pos_rows.push(row);
                    t.pos_labels.push(sup.pos_labels[j]);
                }
            }
        }
        t
    }
}

/// Value and argmax agreement of one head on its masked rows.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HeadStats {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

impl HeadStats {
    pub fn accuracy(&self) -> Option<f64> {
        (self.count > 0).then(|| self.correct as f64 / self.count as f64)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossOutput {
    pub total: Var,
    pub total_value: f64,
    pub nll: f64,
    pub token: HeadStats,
    pub pos: HeadStats,
    pub target_tokens: usize,
}

/// Parameters bound into one graph, in layout order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

/// Dropout source for one forward pass; `None` means evaluation mode.
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

#[derive(Clone)]
pub struct Transformer {
    config: ModelConfig,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Arc<Tensor>>,
    positions: Vec<f64>,
}

impl Transformer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, builder) = build_layout(&config);
        let mut rng = seed::rng(seed, "init");
        let params = builder
            .shapes
            .iter()
            .zip(&builder.inits)
            .map(|(shape, init)| {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Uniform(a) => (0..n).map(|_| rng.gen_range(-a..=*a)).collect(),
                    Init::Xavier => {
                        let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                        (0..n).map(|_| rng.gen_range(-a..=a)).collect()
                    }
                };
                Tensor::new(shape.clone(), data).map(Arc::new)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let positions = sinusoidal_positions(config.max_positions, config.d_model);
        Ok(Self {
            config,
            layout,
            names: builder.names,
            params,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Arc<Tensor>] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &*self.params[i])
    }

    /// Replaces parameter values; shapes must match.
    pub fn set_params(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Usage(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (i, v) in values.iter().enumerate() {
            if v.shape() != self.params[i].shape() {
                return Err(Error::Usage(format!(
                    "parameter {} has shape {:?}, got {:?}",
                    self.names[i],
                    self.params[i].shape(),
                    v.shape()
                )));
            }
            if !v.is_finite() {
                return Err(Error::Usage(format!("parameter {} is not finite", self.names[i])));
            }
        }
        self.params = values.into_iter().map(Arc::new).collect();
        Ok(())
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn param_mut(&mut self, index: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.params[index])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(Arc::make_mut)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Binds every parameter as a graph leaf; `trainable` decides whether
    /// gradients flow to them.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.constant_shared(p.clone())
                }
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Bound { vars })
    }

    fn dropout(&self, g: &mut Graph, x: Var, rng: &mut DropoutRng<'_>) -> Result<Var> {
        let rate = self.config.dropout;
        let Some(rng) = rng.as_deref_mut() else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let factors = (0..g.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        Ok(g.mul_const(x, Arc::new(factors))?)
    }

    fn linear(&self, g: &mut Graph, b: &Bound, l: Linear, x: Var) -> Result<Var> {
        let y = g.matmul(x, b.vars[l.w])?;
        Ok(g.add_bias(y, b.vars[l.b])?)
    }

    fn norm(&self, g: &mut Graph, b: &Bound, n: Norm, x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, b.vars[n.g], b.vars[n.b], LAYER_NORM_EPS)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph,
        b: &Bound,
        a: Attention,
        xq: Var,
        xkv: Var,
        batch: usize,
        allowed: &[bool],
        rng: &mut DropoutRng<'_>,
    ) -> Result<Var> {
        let h = self.config.n_heads;
        let dh = self.config.d_model / h;
        let q = self.linear(g, b, a.q, xq)?;
        let k = self.linear(g, b, a.k, xkv)?;
        let v = self.linear(g, b, a.v, xkv)?;
        let scores = g.head_scores(q, k, batch, h, 1.0 / (dh as f64).sqrt())?;
        let scores = g.apply_attention_mask(scores, allowed)?;
        let p = g.softmax(scores, 1)?;
        let p = self.dropout(g, p, rng)?;
        let mixed = g.head_mix(p, v, batch, h)?;
        self.linear(g, b, a.o, mixed)
    }

    fn ffn(&self, g: &mut Graph, b: &Bound, ff1: Linear, ff2: Linear, x: Var, rng: &mut DropoutRng<'_>) -> Result<Var> {
        let hdn = self.linear(g, b, ff1, x)?;
        let hdn = g.relu(hdn)?;
        let hdn = self.dropout(g, hdn, rng)?;
        self.linear(g, b, ff2, hdn)
    }

    fn embed(&self, g: &mut Graph, b: &Bound, ids: &[usize], width: usize, rng: &mut DropoutRng<'_>) -> Result<Var> {
        let e = self.config.d_model;
        let x = g.gather_rows(b.vars[self.layout.embed], ids)?;
        let x = g.scale(x, (e as f64).sqrt())?;
        let rows = ids.len() / width;
        let mut pe = Vec::with_capacity(ids.len() * e);
        for _ in 0..rows {
            pe.extend_from_slice(&self.positions[..width * e]);
        }
        let x = g.add_const(x, &Tensor::new(vec![ids.len(), e], pe)?)?;
        self.dropout(g, x, rng)
    }

    fn head_mask(&self, batch: usize, lq: usize, lk: usize, visible: impl Fn(usize, usize, usize) -> bool) -> Vec<bool> {
        let h = self.config.n_heads;
        let mut mask = Vec::with_capacity(batch * h * lq * lk);
        for bi in 0..batch {
            for _ in 0..h {
                for i in 0..lq {
                    mask.extend((0..lk).map(|j| visible(bi, i, j)));
                }
            }
        }
        mask
    }

    /// Encoder states `[B·Ls, e]`; pad keys are masked out.
    pub fn encode(&self, g: &mut Graph, b: &Bound, src: &SourceBatch, rng: &mut DropoutRng<'_>) -> Result<Var> {
        self.check_source(src)?;
        let (batch, w) = (src.batch(), src.width);
        let allowed = self.head_mask(batch, w, w, |bi, _, j| j < src.lens[bi]);
        let mut x = self.embed(g, b, &src.ids, w, rng)?;
        for layer in &self.layout.encoder {
            let a = self.attention(g, b, layer.attn, x, x, batch, &allowed, rng)?;
            let a = self.dropout(g, a, rng)?;
            let s = g.add(x, a)?;
            x = self.norm(g, b, layer.ln1, s)?;
            let f = self.ffn(g, b, layer.ff1, layer.ff2, x, rng)?;
            let f = self.dropout(g, f, rng)?;
            let s = g.add(x, f)?;
            x = self.norm(g, b, layer.ln2, s)?;
        }
        Ok(x)
    }

    /// Teacher-forced logits `[B·T, v]` through the tied output projection.
    pub fn decode(
        &self,
        g: &mut Graph,
        b: &Bound,
        memory: Var,
        src: &SourceBatch,
        tgt: &TargetBatch,
        rng: &mut DropoutRng<'_>,
    ) -> Result<Var> {
        let states = self.decode_states(g, b, memory, src, tgt, rng)?;
        let et = g.transpose(b.vars[self.layout.embed])?;
        Ok(g.matmul(states, et)?)
    }

    fn decode_states(
        &self,
        g: &mut Graph,
        b: &Bound,
        memory: Var,
        src: &SourceBatch,
        tgt: &TargetBatch,
        rng: &mut DropoutRng<'_>,
    ) -> Result<Var> {
        if tgt.width > self.config.max_positions {
            return Err(Error::TooLong {
                len: tgt.width,
                limit: self.config.max_positions,
            });
        }
        if tgt.batch() != src.batch() {
            return Err(Error::Usage("source and target batch sizes differ".into()));
        }
        let (batch, t, s) = (tgt.batch(), tgt.width, src.width);
        let causal = self.head_mask(batch, t, t, |_, i, j| j <= i);
        let cross = self.head_mask(batch, t, s, |bi, _, j| j < src.lens[bi]);
        let mut x = self.embed(g, b, &tgt.inputs, t, rng)?;
        for layer in &self.layout.decoder {
            let a = self.attention(g, b, layer.self_attn, x, x, batch, &causal, rng)?;
            let a = self.dropout(g, a, rng)?;
            let r = g.add(x, a)?;
            x = self.norm(g, b, layer.ln1, r)?;
            let c = self.attention(g, b, layer.cross, x, memory, batch, &cross, rng)?;
            let c = self.dropout(g, c, rng)?;
            let r = g.add(x, c)?;
            x = self.norm(g, b, layer.ln2, r)?;
            let f = self.ffn(g, b, layer.ff1, layer.ff2, x, rng)?;
            let f = self.dropout(g, f, rng)?;
            let r = g.add(x, f)?;
            x = self.norm(g, b, layer.ln3, r)?;
        }
        Ok(x)
    }

    fn check_source(&self, src: &SourceBatch) -> Result<()> {
        if src.width > self.config.max_positions {
            return Err(Error::TooLong {
                len: src.width,
                limit: self.config.max_positions,
            });
        }
        if let Some(&bad) = src.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Usage(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    fn head_loss(&self, g: &mut Graph, memory: Var, w: Var, rows: &[usize], labels: &[usize]) -> Result<(Var, HeadStats)> {
        if rows.is_empty() {
            let zero = g.constant(Tensor::scalar(0.0))?;
            return Ok((zero, HeadStats::default()));
        }
        let states = g.gather_rows(memory, rows)?;
        let logits = g.matmul(states, w)?;
        let mask = vec![true; rows.len()];
        let loss = g.masked_cross_entropy(logits, labels, &mask, 0.0)?;
        let lt = g.value(logits);
        let correct = labels
            .iter()
            .enumerate()
            .filter(|&(i, &label)| argmax(lt.row(i)) == label)
            .count();
        let stats = HeadStats {
            loss: g.value(loss).item(),
            correct,
            count: rows.len(),
        };
        Ok((loss, stats))
    }

    /// Token and position head losses on the masked encoder rows.
    pub fn self_supervision_losses(
        &self,
        g: &mut Graph,
        b: &Bound,
        memory: Var,
        targets: &HeadTargets,
    ) -> Result<((Var, HeadStats), (Var, HeadStats))> {
        let token = self.head_loss(g, memory, b.vars[self.layout.head_token], &targets.token_rows, &targets.token_labels)?;
        let pos = self.head_loss(g, memory, b.vars[self.layout.head_pos], &targets.pos_rows, &targets.pos_labels)?;
        Ok((token, pos))
    }

    /// `L_nll + λ_token·L_token + λ_pos·L_pos`, aborting on a non-finite part.
    pub fn bliss_loss(&self, g: &mut Graph, b: &Bound, batch: &TrainBatch, rng: &mut DropoutRng<'_>) -> Result<LossOutput> {
        let memory = self.encode(g, b, &batch.source, rng)?;
        let logits = self.decode(g, b, memory, &batch.source, &batch.target, rng)?;
        let nll = g.masked_cross_entropy(logits, &batch.target.labels, &batch.target.mask, self.config.label_smoothing)?;
        let targets = HeadTargets::from_supervision(&batch.supervision, batch.source.width);
        let ((lt, token), (lp, pos)) = self.self_supervision_losses(g, b, memory, &targets)?;
        let nll_value = g.value(nll).item();
        for (name, v) in [("nll", nll_value), ("token", token.loss), ("pos", pos.loss)] {
            if !v.is_finite() {
                return Err(Error::Divergence {
                    step: 0,
                    detail: format!("{name} loss is {v}"),
                });
            }
        }
        let lt = g.scale(lt, self.config.lambda_token)?;
        let lp = g.scale(lp, self.config.lambda_pos)?;
        let total = g.add(nll, lt)?;
        let total = g.add(total, lp)?;
        Ok(LossOutput {
            total,
            total_value: g.value(total).item(),
            nll: nll_value,
            token,
            pos,
            target_tokens: batch.target.mask.iter().filter(|&&m| m).count(),
        })
    }

    /// Encoder states for a batch, evaluation mode.
    pub fn encode_batch(&self, src: &SourceBatch) -> Result<EncodedBatch> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let memory = self.encode(&mut g, &b, src, &mut None)?;
        Ok(EncodedBatch {
            memory: Arc::new(g.value(memory).clone()),
            lens: src.lens.clone(),
            width: src.width,
        })
    }

    /// Encoder states `[L, e]` of one sentence wrapped in bos/eos.
    pub fn encode_sentence(&self, source: &[usize]) -> Result<Tensor> {
        let src = SourceBatch::new(&[source], self.config.max_positions)?;
        Ok(Arc::try_unwrap(self.encode_batch(&src)?.memory).unwrap_or_else(|a| (*a).clone()))
    }

    /// Log-probabilities of the next token after each prefix, evaluation mode.
    /// `prefixes[i]` is decoded against `encoded` sentence `i`.
    pub fn next_token_log_probs(&self, encoded: &EncodedBatch, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        if prefixes.len() != encoded.lens.len() {
            return Err(Error::Usage("prefix count differs from encoded batch".into()));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let memory = g.constant_shared(encoded.memory.clone())?;
        let src = SourceBatch {
            ids: Vec::new(),
            lens: encoded.lens.clone(),
            width: encoded.width,
        };
        let tgt = TargetBatch::from_prefixes(prefixes, self.config.max_positions)?;
        let states = self.decode_states(&mut g, &b, memory, &src, &tgt, &mut None)?;
        let rows: Vec<usize> = tgt.lens.iter().enumerate().map(|(i, &l)| i * tgt.width + l - 1).collect();
        let last = g.gather_rows(states, &rows)?;
        let et = g.transpose(b.vars[self.layout.embed])?;
        let logits = g.matmul(last, et)?;
        let lp = g.log_softmax(logits, 1)?;
        let t = g.value(lp);
        Ok((0..rows.len()).map(|i| t.row(i).to_vec()).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: self.config.to_pairs(),
            tensors: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(n, p)| (n.clone(), (**p).clone()))
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_pairs(ck.meta.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        let (layout, builder) = build_layout(&config);
        let mut params = Vec::with_capacity(builder.names.len());
        for (name, shape) in builder.names.iter().zip(&builder.shapes) {
            let t = ck
                .tensor(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            params.push(Arc::new(t.clone()));
        }
        let positions = sinusoidal_positions(config.max_positions, config.d_model);
        Ok(Self {
            config,
            layout,
            names: builder.names,
            params,
            positions,
        })
    }

    /// Decoding with a shallow copy of this model under another config.
    pub fn with_config(&self, config: ModelConfig) -> Result<Self> {
        let mut ck = self.to_checkpoint();
        ck.meta = config.to_pairs();
        Self::from_checkpoint(&ck)
    }
}

/// Encoder output of an evaluation-mode batch.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub memory: Arc<Tensor>,
    pub lens: Vec<usize>,
    pub width: usize,
}

impl EncodedBatch {
    /// Rows re-ordered (or repeated) by sentence index.
    pub fn select(&self, sentences: &[usize]) -> Result<Self> {
        let e = self.memory.last_dim();
        let mut data = Vec::with_capacity(sentences.len() * self.width * e);
        for &s in sentences {
            let start = s * self.width * e;
            data.extend_from_slice(&self.memory.data()[start..start + self.width * e]);
        }
        Ok(Self {
            memory: Arc::new(Tensor::new(vec![sentences.len() * self.width, e], data)?),
            lens: sentences.iter().map(|&s| self.lens[s]).collect(),
            width: self.width,
        })
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
