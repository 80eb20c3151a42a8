//! Smooth augmented-data generation: sentence gating, truncated geometric
//! perturbation counts, windowed shuffling, vocabulary replacement, and the
//! per-position labels for the token and position heads. Also hosts the
//! dropout / blank / shuffle baselines.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{self, Sample, BLANK, NUM_SPECIALS};
use crate::error::{Error, Result};
use crate::seed;

/// Token-level probability used by the dropout and blank baselines.
pub const BASELINE_RATE: f64 = 0.1;
/// Window of the shuffle baseline.
pub const BASELINE_WINDOW: usize = 3;
/// Draws per swap before the shuffle gives up on it.
const SWAP_ATTEMPTS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentMode {
    None,
    Bliss,
    Dropout,
    Blank,
    ShuffleBaseline,
}

impl FromStr for AugmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "bliss" => Ok(Self::Bliss),
            "dropout" => Ok(Self::Dropout),
            "blank" => Ok(Self::Blank),
            "shuffle-baseline" => Ok(Self::ShuffleBaseline),
            other => Err(Error::Config(format!(
                "unknown augmentation mode {other:?} (expected none, bliss, dropout, blank or shuffle-baseline)"
            ))),
        }
    }
}

impl fmt::Display for AugmentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Bliss => "bliss",
            Self::Dropout => "dropout",
            Self::Blank => "blank",
            Self::ShuffleBaseline => "shuffle-baseline",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Probability that a sentence is perturbed, drawn separately per function.
    pub gamma: f64,
    /// Cap on the shuffled fraction of a sentence.
    pub alpha_shuffle: f64,
    /// Cap on the replaced fraction of a sentence.
    pub alpha_replace: f64,
    /// Geometric parameter of the perturbation-count distribution.
    pub p: f64,
    /// Shuffle window: partners lie strictly closer than this.
    pub window: usize,
    pub mode: AugmentMode,
    /// Always perturb the maximum count instead of sampling it.
    pub no_smooth: bool,
    /// Bypass augmentation entirely.
    pub no_aug: bool,
    /// Restrict the token head to replaced positions.
    pub token_loss_replaced_only: bool,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.3,
            alpha_shuffle: 0.1,
            alpha_replace: 0.1,
            p: 0.2,
            window: 3,
            mode: AugmentMode::Bliss,
            no_smooth: false,
            no_aug: false,
            token_loss_replaced_only: false,
            seed: 1,
        }
    }
}

/// Per-task `(gamma, alpha_shuffle, alpha_replace)` settings.
pub const TASK_PRESETS: [(&str, f64, f64, f64); 5] = [
    ("wmt14-en-de", 0.3, 0.1, 0.1),
    ("wmt16-en-ro", 0.4, 0.1, 0.1),
    ("iwslt14-de-en", 0.3, 0.12, 0.15),
    ("cnn-dm", 0.4, 0.08, 0.15),
    ("conll14", 0.3, 0.12, 0.1),
];

impl AugmentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (_, gamma, alpha_shuffle, alpha_replace) = TASK_PRESETS
            .iter()
            .find(|(n, ..)| *n == name)
            .ok_or_else(|| Error::Config(format!("unknown augmentation preset {name:?}")))?;
        Ok(Self {
            gamma: *gamma,
            alpha_shuffle: *alpha_shuffle,
            alpha_replace: *alpha_replace,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("gamma", self.gamma)?;
        unit("alpha_shuffle", self.alpha_shuffle)?;
        unit("alpha_replace", self.alpha_replace)?;
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::Config(format!("p must lie in (0, 1), got {}", self.p)));
        }
        if self.window < 2 {
            return Err(Error::Config(format!("window must be at least 2, got {}", self.window)));
        }
        Ok(())
    }

    /// True when the mode produces length-preserving outcomes with labels.
    pub fn supervises(&self) -> bool {
        !self.no_aug && self.mode == AugmentMode::Bliss
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PerturbKind {
    Shuffled,
    Replaced,
}

impl PerturbKind {
    fn as_str(self) -> &'static str {
        match self {
            Self::Shuffled => "shuffled",
            Self::Replaced => "replaced",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PerturbRecord {
    pub position: usize,
    pub kind: PerturbKind,
    /// Token that stood at `position` before perturbation.
    pub original_token: usize,
    /// Where the token now at `position` came from.
    pub origin_position: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PerturbationOutcome {
    pub perturbed: Vec<usize>,
    /// Sorted by position.
    pub records: Vec<PerturbRecord>,
}

impl PerturbationOutcome {
    pub fn identity(source: &[usize]) -> Self {
        Self {
            perturbed: source.to_vec(),
            records: Vec::new(),
        }
    }

    pub fn count(&self, kind: PerturbKind) -> usize {
        self.records.iter().filter(|r| r.kind == kind).count()
    }
}

/// `floor(alpha · len)`, tolerant of representation error in the product.
pub fn perturb_cap(alpha: f64, len: usize) -> usize {
    (alpha * len as f64 + 1e-9).floor() as usize
}

/// `P(l) = p(1-p)^(l-1) / Σ_{i=1..cap} p(1-p)^(i-1)` for `l = 1..=cap`.
pub fn truncated_geometric_pmf(p: f64, cap: usize) -> Vec<f64> {
    let weights: Vec<f64> = (0..cap).map(|i| p * (1.0 - p).powi(i as i32)).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Number of tokens one perturbing function touches in a sentence of `len`.
/// Zero when the cap rounds below one; the cap itself when `no_smooth`.
pub fn sample_perturb_count<R: Rng + ?Sized>(alpha: f64, len: usize, p: f64, no_smooth: bool, rng: &mut R) -> usize {
    let cap = perturb_cap(alpha, len);
    if cap < 1 {
        return 0;
    }
    if no_smooth || cap == 1 {
        return cap;
    }
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, prob) in truncated_geometric_pmf(p, cap).into_iter().enumerate() {
        acc += prob;
        if u < acc {
            return i + 1;
        }
    }
    cap
}

pub fn gate_sentence<R: Rng + ?Sized>(gamma: f64, rng: &mut R) -> bool {
    rng.gen::<f64>() < gamma
}

/// Performs `ceil(count / 2)` swaps between untouched positions less than
/// `window` apart. Only positions whose token actually changed are recorded.
pub fn shuffle_perturb<R: Rng + ?Sized>(seq: &[usize], count: usize, window: usize, rng: &mut R) -> PerturbationOutcome {
    let len = seq.len();
    let mut perturbed = seq.to_vec();
    let mut origin: Vec<usize> = (0..len).collect();
    let mut touched = vec![false; len];
    if len >= 2 {
        for _ in 0..count.div_ceil(2) {
            for _ in 0..SWAP_ATTEMPTS {
                let i = rng.gen_range(0..len);
                if touched[i] {
                    continue;
                }
                let lo = i.saturating_sub(window - 1);
                let hi = (i + window - 1).min(len - 1);
                // Uniform over [lo, hi] without i.
                let mut j = rng.gen_range(lo..hi);
                if j >= i {
                    j += 1;
                }
                if touched[j] {
                    continue;
                }
                perturbed.swap(i, j);
                origin.swap(i, j);
                touched[i] = true;
                touched[j] = true;
                break;
            }
        }
    }
    let records = (0..len)
        .filter(|&j| perturbed[j] != seq[j])
        .map(|j| PerturbRecord {
            position: j,
            kind: PerturbKind::Shuffled,
            original_token: seq[j],
            origin_position: origin[j],
        })
        .collect();
    PerturbationOutcome { perturbed, records }
}

/// Uniform content id different from `incumbent`, or `None` if no such id exists.
pub(crate) fn replacement_token<R: Rng + ?Sized>(vocab_size: usize, incumbent: usize, rng: &mut R) -> Option<usize> {
    let content = vocab_size.saturating_sub(NUM_SPECIALS);
    if data::is_special(incumbent) || incumbent >= vocab_size {
        return (content > 0).then(|| NUM_SPECIALS + rng.gen_range(0..content));
    }
    if content < 2 {
        return None;
    }
    let id = NUM_SPECIALS + rng.gen_range(0..content - 1);
    Some(if id >= incumbent { id + 1 } else { id })
}

/// Replaces `count` distinct positions outside `excluded` by content tokens
/// other than the incumbent. Clamps to the eligible positions.
pub fn replace_perturb<R: Rng + ?Sized>(
    seq: &[usize],
    count: usize,
    vocab_size: usize,
    rng: &mut R,
    excluded: &[usize],
) -> PerturbationOutcome {
    let eligible: Vec<usize> = (0..seq.len()).filter(|j| !excluded.contains(j)).collect();
    let picks = count.min(eligible.len());
    let mut perturbed = seq.to_vec();
    let mut records = Vec::with_capacity(picks);
    if picks > 0 {
        let mut chosen: Vec<usize> = index::sample(rng, eligible.len(), picks)
            .into_iter()
            .map(|k| eligible[k])
            .collect();
        chosen.sort_unstable();
        for j in chosen {
            if let Some(token) = replacement_token(vocab_size, seq[j], rng) {
                perturbed[j] = token;
                records.push(PerturbRecord {
                    position: j,
                    kind: PerturbKind::Replaced,
                    original_token: seq[j],
                    origin_position: j,
                });
            }
        }
    }
    PerturbationOutcome { perturbed, records }
}

/// Window-limited local permutation: each token is keyed by `i + U[0, window)`
/// and the sentence is re-sorted, so no token moves `window` or more places.
fn local_permutation<R: Rng + ?Sized>(seq: &[usize], window: usize, rng: &mut R) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = seq
        .iter()
        .enumerate()
        .map(|(i, &t)| (i as f64 + rng.gen::<f64>() * window as f64, t))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    keyed.into_iter().map(|(_, t)| t).collect()
}

fn merge(seq: &[usize], shuffled: PerturbationOutcome, replaced: PerturbationOutcome) -> PerturbationOutcome {
    let mut perturbed = shuffled.perturbed;
    for r in &replaced.records {
        perturbed[r.position] = replaced.perturbed[r.position];
    }
    let mut records = shuffled.records;
    records.extend(replaced.records);
    records.sort_by_key(|r| r.position);
    debug_assert_eq!(perturbed.len(), seq.len());
    PerturbationOutcome { perturbed, records }
}

/// Applies the configured augmentation to one source sentence.
pub fn augment_sentence<R: Rng + ?Sized>(
    source: &[usize],
    vocab_size: usize,
    config: &AugmentConfig,
    rng: &mut R,
) -> PerturbationOutcome {
    if config.no_aug {
        return PerturbationOutcome::identity(source);
    }
    let len = source.len();
    match config.mode {
        AugmentMode::None => PerturbationOutcome::identity(source),
        AugmentMode::Bliss => {
            let shuffled = if gate_sentence(config.gamma, rng) {
                let l = sample_perturb_count(config.alpha_shuffle, len, config.p, config.no_smooth, rng);
                shuffle_perturb(source, l, config.window, rng)
            } else {
                PerturbationOutcome::identity(source)
            };
            let replaced = if gate_sentence(config.gamma, rng) {
                let l = sample_perturb_count(config.alpha_replace, len, config.p, config.no_smooth, rng);
                let excluded: Vec<usize> = shuffled.records.iter().map(|r| r.position).collect();
                replace_perturb(&shuffled.perturbed, l, vocab_size, rng, &excluded)
            } else {
                PerturbationOutcome::identity(&shuffled.perturbed)
            };
            merge(source, shuffled, replaced)
        }
        AugmentMode::Dropout => {
            let kept: Vec<usize> = source
                .iter()
                .copied()
                .filter(|_| rng.gen::<f64>() >= BASELINE_RATE)
                .collect();
            let perturbed = if kept.is_empty() {
                vec![source[rng.gen_range(0..len)]]
            } else {
                kept
            };
            PerturbationOutcome {
                perturbed,
                records: Vec::new(),
            }
        }
        AugmentMode::Blank => PerturbationOutcome {
            perturbed: source
                .iter()
                .map(|&t| if rng.gen::<f64>() < BASELINE_RATE { BLANK } else { t })
                .collect(),
            records: Vec::new(),
        },
        AugmentMode::ShuffleBaseline => PerturbationOutcome {
            perturbed: local_permutation(source, BASELINE_WINDOW, rng),
            records: Vec::new(),
        },
    }
}

/// RNG for sentence `index` in `epoch`; independent of processing order.
pub fn sentence_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    seed::rng_indexed(seed::derive_indexed(seed, "augment", epoch), "sentence", index)
}

/// Augments every sample of a corpus for one epoch.
pub fn augment_corpus(samples: &[Sample], vocab_size: usize, config: &AugmentConfig, epoch: u64) -> Vec<PerturbationOutcome> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = sentence_rng(config.seed, epoch, i as u64);
            augment_sentence(&s.source, vocab_size, config, &mut rng)
        })
        .collect()
}

/// Per-position targets for the token and position heads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Supervision {
    pub token_labels: Vec<usize>,
    pub token_mask: Vec<bool>,
    pub pos_labels: Vec<usize>,
    pub pos_mask: Vec<bool>,
}

impl Supervision {
    pub fn empty(len: usize) -> Self {
        Self {
            token_labels: vec![0; len],
            token_mask: vec![false; len],
            pos_labels: vec![0; len],
            pos_mask: vec![false; len],
        }
    }
}

pub fn build_supervision(
    outcome: &PerturbationOutcome,
    len: usize,
    max_positions: usize,
    token_loss_replaced_only: bool,
) -> Result<Supervision> {
    let mut sup = Supervision::empty(len);
    for r in &outcome.records {
        if r.origin_position >= max_positions || r.position >= max_positions {
            return Err(Error::TooLong {
                len: r.origin_position.max(r.position) + 1,
                limit: max_positions,
            });
        }
        if r.position >= len {
            return Err(Error::Config(format!(
                "record position {} outside sentence of length {len}",
                r.position
            )));
        }
        if r.kind == PerturbKind::Replaced || !token_loss_replaced_only {
            sup.token_mask[r.position] = true;
            sup.token_labels[r.position] = r.original_token;
        }
        if r.kind == PerturbKind::Shuffled {
            sup.pos_mask[r.position] = true;
            sup.pos_labels[r.position] = r.origin_position;
        }
    }
    Ok(sup)
}

fn format_ids(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// Renders one line of the perturbed-dataset file.
pub fn format_perturbed_line(outcome: &PerturbationOutcome, target: &[usize]) -> String {
    let records = outcome
        .records
        .iter()
        .map(|r| format!("{}:{}:{}:{}", r.position, r.kind.as_str(), r.original_token, r.origin_position))
        .collect::<Vec<_>>()
        .join(",");
    format!("{}\t{}\t{}", format_ids(&outcome.perturbed), format_ids(target), records)
}

pub fn parse_perturbed_line(line: &str) -> std::result::Result<(PerturbationOutcome, Vec<usize>), String> {
    let mut fields = line.split('\t');
    let (Some(src), Some(tgt), Some(recs), None) = (fields.next(), fields.next(), fields.next(), fields.next()) else {
        return Err("expected three tab-separated fields".into());
    };
    let perturbed = data::parse_ids(src)?;
    let target = data::parse_ids(tgt)?;
    let mut records = Vec::new();
    for quad in recs.split(',').filter(|q| !q.is_empty()) {
        let parts: Vec<&str> = quad.split(':').collect();
        let [j, kind, tok, pos] = parts.as_slice() else {
            return Err(format!("malformed record {quad:?}"));
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| format!("malformed record {quad:?}"));
        let kind = match *kind {
            "shuffled" => PerturbKind::Shuffled,
            "replaced" => PerturbKind::Replaced,
            other => return Err(format!("unknown record kind {other:?}")),
        };
        records.push(PerturbRecord {
            position: num(j)?,
            kind,
            original_token: num(tok)?,
            origin_position: num(pos)?,
        });
    }
    Ok((PerturbationOutcome { perturbed, records }, target))
}

pub fn save_perturbed(path: &Path, rows: &[(PerturbationOutcome, Vec<usize>)]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (outcome, target) in rows {
        writeln!(w, "{}", format_perturbed_line(outcome, target))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_perturbed(path: &Path) -> Result<Vec<(PerturbationOutcome, Vec<usize>)>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            parse_perturbed_line(line).map_err(|message| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message,
            })
        })
        .collect()
}
