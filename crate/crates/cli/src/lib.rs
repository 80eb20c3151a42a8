//! The `bliss` command line: corpus generation, augmentation, training,
//! decoding and evaluation.

mod commands;
pub mod settings;

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};

use settings::{Group, Settings};

struct Spec {
    name: &'static str,
    about: &'static str,
    groups: &'static [Group],
    paths: &'static [(&'static str, &'static str, bool)],
}

const COMMANDS: &[Spec] = &[
    Spec {
        name: "gen-synth",
        about: "Generate a synthetic corpus",
        groups: &[Group::Corpus],
        paths: &[("test-out", "write the extra test samples here", false)],
    },
    Spec {
        name: "build-vocab",
        about: "Build a vocabulary file from whitespace-tokenized text",
        groups: &[],
        paths: &[],
    },
    Spec {
        name: "perturb",
        about: "Write one epoch of augmented sources with their records",
        groups: &[Group::Corpus, Group::Augment],
        paths: &[
            ("corpus", "input corpus file", true),
            ("epoch", "epoch whose perturbations are drawn", false),
        ],
    },
    Spec {
        name: "train",
        about: "Train a model and write its checkpoint",
        groups: &[Group::Augment, Group::Model, Group::Train],
        paths: &[
            ("corpus", "training corpus file", true),
            ("metrics", "metrics CSV path", false),
            ("resume", "checkpoint to continue from", false),
        ],
    },
    Spec {
        name: "decode",
        about: "Decode source sentences with a trained checkpoint",
        groups: &[Group::Beam],
        paths: &[
            ("checkpoint", "model checkpoint", true),
            ("input", "source ids per line, or a corpus file", true),
            ("vocab", "read and write tokens through this vocabulary", false),
        ],
    },
    Spec {
        name: "score-bleu",
        about: "Corpus BLEU of hypotheses against references",
        groups: &[],
        paths: &[
            ("hypotheses", "one hypothesis per line", true),
            ("references", "one reference per line, or a corpus file", true),
        ],
    },
    Spec {
        name: "noise-eval",
        about: "Score models on noised copies of a test corpus",
        groups: &[Group::Corpus, Group::Beam, Group::Noise],
        paths: &[("test", "test corpus file", true)],
    },
    Spec {
        name: "probe",
        about: "Probe mean-pooled encoder representations",
        groups: &[Group::Probe],
        paths: &[
            ("checkpoint", "model checkpoint", true),
            ("input", "sentences as ids per line, or a corpus file", true),
        ],
    },
    Spec {
        name: "ablate",
        about: "Train the ablation grid and compare it under noise",
        groups: &[Group::Corpus, Group::Augment, Group::Model, Group::Train, Group::Beam, Group::Noise],
        paths: &[
            ("corpus", "training corpus file", true),
            ("test", "test corpus file", true),
            ("checkpoint-dir", "also keep each variant's checkpoint here", false),
        ],
    },
];

pub fn cli() -> Command {
    let defaults = Settings::default();
    let mut root = Command::new("bliss")
        .about("Perturbation-based self-supervised sequence-to-sequence toolkit")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for spec in COMMANDS {
        let mut cmd = Command::new(spec.name)
            .about(spec.about)
            .arg(Arg::new("config").long("config").value_name("PATH").help("key = value settings file"))
            .arg(
                Arg::new("out")
                    .long("out")
                    .value_name("PATH")
                    .help("output file")
                    .required(!matches!(spec.name, "score-bleu" | "probe")),
            );
        for e in defaults.keys_for(spec.groups) {
            let mut arg = Arg::new(e.key.clone())
                .long(e.key.clone())
                .value_name("VALUE")
                .help(format!("{} [default: {}]", e.help, e.value));
            if e.flag {
                arg = arg.num_args(0..=1).default_missing_value("true");
            }
            cmd = cmd.arg(arg);
        }
        for &(name, help, required) in spec.paths {
            cmd = cmd.arg(Arg::new(name).long(name).value_name("PATH").help(help).required(required));
        }
        if spec.name == "build-vocab" {
            cmd = cmd.arg(Arg::new("inputs").value_name("FILE").num_args(1..).required(true).help("text files"));
        }
        if spec.name == "noise-eval" {
            cmd = cmd.arg(
                Arg::new("model")
                    .long("model")
                    .value_name("NAME=PATH")
                    .action(ArgAction::Append)
                    .required(true)
                    .help("model to evaluate; repeatable"),
            );
        }
        root = root.subcommand(cmd);
    }
    root
}

/// A parsed invocation: resolved settings plus the raw matches for paths.
pub struct Invocation {
    pub settings: Settings,
    pub matches: ArgMatches,
}

impl Invocation {
    pub fn path(&self, name: &str) -> Option<PathBuf> {
        self.matches.get_one::<String>(name).map(PathBuf::from)
    }

    pub fn required_path(&self, name: &str) -> Result<PathBuf> {
        match self.path(name) {
            Some(p) => Ok(p),
            None => bail!("--{name} is required"),
        }
    }
}

fn resolve(spec: &Spec, matches: ArgMatches) -> Result<Invocation> {
    let mut settings = Settings::default();
    if let Some(path) = matches.get_one::<String>("config") {
        settings.load_file(path.as_ref())?;
    }
    let keys: Vec<String> = settings.keys_for(spec.groups).map(|e| e.key.clone()).collect();
    for key in keys {
        if let Some(v) = matches.get_one::<String>(&key) {
            settings.set(&key, v)?;
        }
    }
    if settings.get::<usize>("threads")? == 0 {
        bail!("threads must be at least 1");
    }
    let mut paths: Vec<(&str, String)> = Vec::new();
    for name in ["out"].into_iter().chain(spec.paths.iter().map(|p| p.0)) {
        if let Some(v) = matches.get_one::<String>(name) {
            paths.push((name, v.clone()));
        }
    }
    eprint!("{}", settings.render(spec.name, spec.groups, &paths));
    Ok(Invocation { settings, matches })
}

fn run(name: &str, matches: ArgMatches) -> Result<()> {
    let spec = COMMANDS.iter().find(|s| s.name == name).expect("registered subcommand");
    let inv = resolve(spec, matches)?;
    if inv.settings.get::<usize>("threads")? > 1 {
        log::warn!("computation is single-threaded; --threads above 1 has no effect");
    }
    match name {
        "gen-synth" => commands::gen_synth(&inv),
        "build-vocab" => commands::build_vocab(&inv),
        "perturb" => commands::perturb(&inv),
        "train" => commands::train(&inv),
        "decode" => commands::decode(&inv),
        "score-bleu" => commands::score_bleu(&inv),
        "noise-eval" => commands::noise_eval(&inv),
        "probe" => commands::probe(&inv),
        "ablate" => commands::ablate(&inv),
        _ => unreachable!("unhandled subcommand {name}"),
    }
}

/// Parses `args` (program name first) and runs the subcommand. Returns the
/// process exit code: 0 on success, 2 for usage errors, 1 for failures.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match cli().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match run(name, sub.clone()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
