//! `xvl`: generate a synthetic corpus, train, and run the zero-shot tasks.

mod attend;
mod correct;
mod data;
mod eval;
mod manifest;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Args, Command, CommandFactory, FromArgMatches, Parser, Subcommand};
use xvl_core::trainer::TrainConfig;

/// Exit status for each failure class.
const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

/// A mistake in how the command was invoked.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "xvl", version, about = "Cross-attention vision-language pre-training on synthetic studies")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus split 80/10/10 into train/val/test.
    GenData(data::GenDataArgs),
    /// Train a model on `<data>/train.jsonl`. Every config key is also a
    /// `--key value` flag; flags override `--config`, which overrides the
    /// desk defaults.
    Train(train::TrainArgs),
    /// Zero-shot classification AUC/F1 per class in simple and detailed mode.
    EvalClassify(eval::ClassifyArgs),
    /// Zero-shot error detection AUC/F1 per error type.
    EvalErrors(eval::ErrorArgs),
    /// Single-word report correction.
    Correct(correct::CorrectArgs),
    /// Gradient-weighted cross-attention maps, one per word.
    Attend(attend::AttendArgs),
}

fn command() -> Command {
    Cli::command().mut_subcommand("train", |mut c| {
        let defaults = TrainConfig::desk().to_text();
        for line in defaults.lines() {
            let (key, value) = line.split_once(" = ").expect("config line");
            let key: &'static str = Box::leak(key.to_string().into_boxed_str());
            let help: &'static str = Box::leak(format!("Config override (desk default {value})").into_boxed_str());
            c = c.arg(
                Arg::new(key)
                    .long(key)
                    .value_name("VALUE")
                    .help(help)
                    .help_heading("Config keys"),
            );
        }
        c
    })
}

/// `(key, value)` pairs of config flags given on the command line.
pub fn config_overrides(matches: &ArgMatches) -> Vec<(String, String)> {
    TrainConfig::keys()
        .into_iter()
        .filter_map(|k| matches.get_one::<String>(&k).map(|v| (k.clone(), v.clone())))
        .collect()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<xvl_core::Error>() {
            return match e {
                xvl_core::Error::NonFinite { .. } => EXIT_NUMERIC,
                xvl_core::Error::Config(_) | xvl_core::Error::InvalidArgument(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

fn run(cli: Cli, matches: &ArgMatches) -> anyhow::Result<()> {
    let argv: Vec<String> = std::env::args().collect();
    match cli.command {
        Cmd::GenData(a) => data::run(a, &argv),
        Cmd::Train(a) => {
            let sub = matches.subcommand_matches("train").expect("train matches");
            train::run(a, config_overrides(sub), &argv)
        }
        Cmd::EvalClassify(a) => eval::run_classify(a, &argv),
        Cmd::EvalErrors(a) => eval::run_errors(a, &argv),
        Cmd::Correct(a) => correct::run(a, &argv),
        Cmd::Attend(a) => attend::run(a, &argv),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Shared `--checkpoint` / `--teacher` / `--score` flags.
#[derive(Args, Clone, Debug)]
pub struct ModelArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Score with the momentum teacher instead of the student.
    #[arg(long)]
    pub teacher: bool,
    /// Match score: `itm` (fusion head) or `cosine` (projected [CLS] features).
    #[arg(long, default_value = "itm")]
    pub score: String,
}

/// A checkpoint opened for scoring.
pub struct Loaded {
    pub checkpoint: xvl_core::trainer::Checkpoint,
    pub model: xvl_core::model::Model,
    pub vocab: xvl_core::textpipe::Vocabulary,
    pub function: xvl_core::zeroshot::ScoreFunction,
    teacher: bool,
}

impl ModelArgs {
    pub fn load(&self) -> anyhow::Result<Loaded> {
        use anyhow::Context;
        let function = self.score.parse().map_err(|e: xvl_core::Error| usage(e.to_string()))?;
        let checkpoint = xvl_core::trainer::Checkpoint::load(&self.checkpoint)
            .with_context(|| format!("loading {}", self.checkpoint.display()))?;
        let model = checkpoint.bind_model()?;
        let vocab = checkpoint.vocabulary();
        Ok(Loaded {
            checkpoint,
            model,
            vocab,
            function,
            teacher: self.teacher,
        })
    }
}

impl Loaded {
    pub fn scorer(&self) -> xvl_core::zeroshot::Scorer<'_> {
        let params = if self.teacher {
            &self.checkpoint.teacher
        } else {
            &self.checkpoint.student
        };
        xvl_core::zeroshot::Scorer::new(&self.model, params, &self.vocab).with_function(self.function)
    }
}
