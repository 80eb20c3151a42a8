use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use bliss_core::augment::{augment_corpus, save_perturbed};
use bliss_core::checkpoint::Checkpoint;
use bliss_core::data::{gen_synthetic, load_corpus, save_corpus, Sample, Vocabulary};
use bliss_core::eval::noise::{write_noise_csv, NoiseRow};
use bliss_core::eval::{corpus_bleu, decode_corpus, noise_eval as run_noise_eval, probe_model};
use bliss_core::model::Transformer;
use bliss_core::train::{train_from, TrainConfig, TrainState};

use crate::Invocation;

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for line in lines {
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Lines of a plain file, or one field of a tab-separated corpus file.
fn read_field(path: &Path, field: usize) -> Result<Vec<String>> {
    Ok(read_text(path)?
        .lines()
        .map(|l| l.split('\t').nth(field).unwrap_or(if field == 0 { l } else { "" }).to_string())
        .collect())
}

fn parse_id_lines(path: &Path) -> Result<Vec<Vec<usize>>> {
    read_field(path, 0)?
        .iter()
        .enumerate()
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|t| t.parse::<usize>().map_err(|_| anyhow!("{}:{}: invalid token id {t:?}", path.display(), i + 1)))
                .collect()
        })
        .collect()
}

fn load_model(path: &Path) -> Result<Transformer> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Transformer::from_checkpoint(&ck)?)
}

fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    load_corpus(path).with_context(|| format!("loading {}", path.display()))
}

pub fn gen_synth(inv: &Invocation) -> Result<()> {
    let mut spec = inv.settings.corpus_spec()?;
    let test_samples: usize = inv.settings.get("corpus.test_samples")?;
    let out = inv.required_path("out")?;
    let test_out = inv.path("test-out");
    if test_samples > 0 && test_out.is_none() {
        bail!("corpus.test_samples > 0 needs --test-out");
    }
    spec.samples += test_samples;
    let corpus = gen_synthetic(&spec)?;
    let (main, test) = corpus.split_at(corpus.len() - test_samples);
    save_corpus(&out, main)?;
    if let Some(path) = test_out {
        save_corpus(&path, test)?;
    }
    log::info!("wrote {} samples to {} and {} test samples", main.len(), out.display(), test.len());
    Ok(())
}

pub fn build_vocab(inv: &Invocation) -> Result<()> {
    let mut text = String::new();
    for input in inv.matches.get_many::<String>("inputs").into_iter().flatten() {
        text.push_str(&read_text(Path::new(input))?);
        text.push('\n');
    }
    let (vocab, skipped) = Vocabulary::build(text.lines())?;
    let out = inv.required_path("out")?;
    vocab.save(&out)?;
    log::info!("{} tokens written to {}; {skipped} empty lines skipped", vocab.len(), out.display());
    Ok(())
}

pub fn perturb(inv: &Invocation) -> Result<()> {
    let corpus = load_samples(&inv.required_path("corpus")?)?;
    let augment = inv.settings.augment()?;
    let vocab_size: usize = inv.settings.get("corpus.vocab_size")?;
    let epoch: u64 = match inv.matches.get_one::<String>("epoch") {
        Some(e) => e.parse().map_err(|_| anyhow!("invalid epoch {e:?}"))?,
        None => 0,
    };
    let outcomes = augment_corpus(&corpus, vocab_size, &augment, epoch);
    let rows: Vec<_> = outcomes.into_iter().zip(corpus.iter().map(|s| s.target.clone())).collect();
    let out = inv.required_path("out")?;
    save_perturbed(&out, &rows)?;
    let touched = rows.iter().filter(|(o, _)| !o.records.is_empty()).count();
    log::info!("{touched} of {} sentences perturbed", rows.len());
    Ok(())
}

pub fn train(inv: &Invocation) -> Result<()> {
    let corpus = load_samples(&inv.required_path("corpus")?)?;
    let config = TrainConfig {
        checkpoint_path: Some(inv.required_path("out")?),
        metrics_path: inv.path("metrics"),
        ..inv.settings.train()?
    };
    let state = match inv.path("resume") {
        Some(path) => TrainState::from_checkpoint(&Checkpoint::load(&path)?, &config)?,
        None => TrainState::fresh(&config)?,
    };
    let report = train_from(&config, &corpus, state)?;
    if let Some(last) = report.metrics.last() {
        log::info!("finished at step {}: loss {:.4}", last.step, last.loss_total);
    }
    Ok(())
}

pub fn decode(inv: &Invocation) -> Result<()> {
    let model = load_model(&inv.required_path("checkpoint")?)?;
    let input = inv.required_path("input")?;
    let vocab = inv.path("vocab").map(|p| Vocabulary::load(&p)).transpose()?;
    let sources = match &vocab {
        Some(v) => read_field(&input, 0)?.iter().map(|l| v.encode_line(l)).collect(),
        None => parse_id_lines(&input)?,
    };
    if let Some(i) = sources.iter().position(Vec::is_empty) {
        bail!("{}:{}: empty source", input.display(), i + 1);
    }
    let hyps = decode_corpus(&model, &sources, &inv.settings.beam()?)?;
    let unfinished = hyps.iter().filter(|h| !h.finished).count();
    if unfinished > 0 {
        log::warn!("{unfinished} hypotheses reached the length limit without eos");
    }
    let lines = hyps.iter().map(|h| match &vocab {
        Some(v) => v.decode_ids(&h.tokens),
        None => h.tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
    });
    write_lines(&inv.required_path("out")?, lines)
}

pub fn score_bleu(inv: &Invocation) -> Result<()> {
    let hyps = read_field(&inv.required_path("hypotheses")?, 0)?;
    let refs_path = inv.required_path("references")?;
    let text = read_text(&refs_path)?;
    let refs: Vec<&str> = text.lines().map(|l| l.split_once('\t').map_or(l, |(_, t)| t)).collect();
    if hyps.len() != refs.len() {
        bail!("{} hypotheses but {} references", hyps.len(), refs.len());
    }
    let h: Vec<Vec<&str>> = hyps.iter().map(|l| l.split_whitespace().collect()).collect();
    let r: Vec<Vec<&str>> = refs.iter().map(|l| l.split_whitespace().collect()).collect();
    let bleu = corpus_bleu(&h, &r)?;
    println!("BLEU = {bleu:.4}");
    if let Some(out) = inv.path("out") {
        write_lines(&out, [format!("{bleu}")])?;
    }
    Ok(())
}

fn print_table(rows: &[NoiseRow]) {
    for r in rows {
        println!("{:<16} {:<13} {:>5.2} {:>9.4} {:>7.4}", r.model, r.kind, r.ratio, r.score, r.scaled);
    }
}

pub fn noise_eval(inv: &Invocation) -> Result<()> {
    let test = load_samples(&inv.required_path("test")?)?;
    let mut models = Vec::new();
    for spec in inv.matches.get_many::<String>("model").into_iter().flatten() {
        let (name, path) = spec.split_once('=').ok_or_else(|| anyhow!("--model expects NAME=PATH, got {spec:?}"))?;
        models.push((name.to_string(), load_model(Path::new(path))?));
    }
    let refs: Vec<(String, &Transformer)> = models.iter().map(|(n, m)| (n.clone(), m)).collect();
    let rows = run_noise_eval(
        &refs,
        inv.settings.task()?,
        &test,
        &inv.settings.noise_kinds()?,
        &inv.settings.noise_ratios()?,
        &inv.settings.beam()?,
        inv.settings.seed()?,
    )?;
    print_table(&rows);
    write_noise_csv(&inv.required_path("out")?, &rows)?;
    Ok(())
}

pub fn probe(inv: &Invocation) -> Result<()> {
    let model = load_model(&inv.required_path("checkpoint")?)?;
    let sentences = parse_id_lines(&inv.required_path("input")?)?;
    let task = inv.settings.probe_task()?;
    let r = probe_model(&model, task, &sentences, &inv.settings.probe()?)?;
    println!(
        "{task}: accuracy {:.4}, majority baseline {:.4} ({} train, {} valid)",
        r.accuracy, r.majority_baseline, r.train_size, r.valid_size
    );
    if let Some(out) = inv.path("out") {
        write_lines(
            &out,
            [
                "task,accuracy,majority_baseline,train_size,valid_size".to_string(),
                format!("{task},{},{},{},{}", r.accuracy, r.majority_baseline, r.train_size, r.valid_size),
            ],
        )?;
    }
    Ok(())
}

/// The ablation variants: name and the switches it turns on.
pub const ABLATIONS: [(&str, bool, bool, bool, bool); 5] = [
    ("full", false, false, false, false),
    ("-aug-smooth", true, true, false, false),
    ("-smooth", false, true, false, false),
    ("-token", false, false, true, false),
    ("-pos", false, false, false, true),
];

pub fn ablate(inv: &Invocation) -> Result<()> {
    let corpus = load_samples(&inv.required_path("corpus")?)?;
    let test = load_samples(&inv.required_path("test")?)?;
    let base = inv.settings.train()?;
    let dir = inv.path("checkpoint-dir");
    if let Some(d) = &dir {
        fs::create_dir_all(d)?;
    }
    let mut models = Vec::new();
    for (name, no_aug, no_smooth, no_token, no_pos) in ABLATIONS {
        let mut config = base.clone();
        config.ablation.no_aug |= no_aug;
        config.ablation.no_smooth |= no_smooth;
        config.ablation.no_token |= no_token;
        config.ablation.no_pos |= no_pos;
        config.checkpoint_path = dir.as_ref().map(|d| d.join(format!("{}.ckpt", name.trim_start_matches('-'))));
        log::info!("training variant {name}");
        let report = train_from(&config, &corpus, TrainState::fresh(&config)?)?;
        models.push((name.to_string(), report.state.model));
    }
    let refs: Vec<(String, &Transformer)> = models.iter().map(|(n, m)| (n.clone(), m)).collect();
    let rows = run_noise_eval(
        &refs,
        inv.settings.task()?,
        &test,
        &inv.settings.noise_kinds()?,
        &inv.settings.noise_ratios()?,
        &inv.settings.beam()?,
        inv.settings.seed()?,
    )?;
    print_table(&rows);
    write_noise_csv(&inv.required_path("out")?, &rows)?;
    Ok(())
}
