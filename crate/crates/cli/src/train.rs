//! `train`.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use xvl_core::textpipe::build_vocab;
use xvl_core::trainer::{Checkpoint, StepRecord, TrainConfig, Trainer};

use crate::manifest::{load_corpus, RunManifest};
use crate::usage;

pub const LOG_FILE: &str = "steps.jsonl";
pub const CONFIG_FILE: &str = "config.txt";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
const BEST_FILE: &str = "best.json";

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory produced by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// `key = value` config file, applied on top of the desk defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint. The config is taken from it.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this global step (the run can be resumed from last.ckpt).
    #[arg(long)]
    pub max_steps: Option<u64>,
}

/// Lowest epoch-mean training loss seen so far.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct Best {
    epoch: u64,
    mean_loss: f64,
}

/// Desk defaults, then the config file, then command-line overrides.
pub fn resolve_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::desk();
    if let Some(p) = file {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        cfg.apply_text(&text).with_context(|| format!("in {}", p.display()))?;
    }
    for (k, v) in overrides {
        cfg.set(k, v).with_context(|| format!("--{k}"))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Keeps the log lines strictly before `step`, so a resumed run appends
/// exactly where its checkpoint left off.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let mut kept = String::new();
    for line in text.lines() {
        let r: StepRecord = serde_json::from_str(line).with_context(|| format!("parsing {}", path.display()))?;
        if r.step < step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

pub fn run(args: TrainArgs, overrides: Vec<(String, String)>, argv: &[String]) -> Result<()> {
    let train_path = args.data.join("train.jsonl");
    let corpus = load_corpus(&train_path)?;
    let mut trainer = match &args.resume {
        Some(p) => {
            if args.config.is_some() || !overrides.is_empty() {
                return Err(usage("--resume takes its config from the checkpoint; drop --config and key flags"));
            }
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            Trainer::resume(ck, &corpus)?
        }
        None => {
            let cfg = resolve_config(args.config.as_deref(), &overrides)?;
            let vocab = build_vocab(&corpus)?;
            Trainer::new(cfg, &corpus, vocab)?
        }
    };
    let cfg = trainer.config().clone();
    let out = &args.out;
    let mut manifest = RunManifest::new("train", argv, serde_json::to_value(&cfg)?, cfg.seed)
        .input(&train_path)
        .output(out.join(LOG_FILE))
        .output(out.join(FINAL_CKPT))
        .output(out.join(BEST_CKPT));
    if let Some(p) = &args.resume {
        manifest = manifest.input(p);
    }
    manifest.write(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    trainer.set_dump_dir(out);

    let log_path = out.join(LOG_FILE);
    let start_step = trainer.state().step;
    if args.resume.is_some() {
        truncate_log(&log_path, start_step)?;
    } else if log_path.exists() {
        fs::remove_file(&log_path)?;
    }
    let mut log = BufWriter::new(OpenOptions::new().create(true).append(true).open(&log_path)?);
    let best_path = out.join(BEST_FILE);
    let mut best: Option<Best> = match (&args.resume, best_path.exists()) {
        (Some(_), true) => Some(serde_json::from_str(&fs::read_to_string(&best_path)?)?),
        _ => None,
    };

    let spe = trainer.steps_per_epoch();
    let stop = args.max_steps.unwrap_or(u64::MAX).min(trainer.total_steps());
    log::info!(
        "{} studies, {} steps per epoch, {} steps total, starting at {start_step}",
        corpus.len(),
        spe,
        trainer.total_steps()
    );
    while trainer.state().step < stop {
        let epoch = trainer.state().step / spe;
        let boundary = ((epoch + 1) * spe).min(stop);
        let mut write_err = None;
        trainer.run_until(boundary, |o| {
            let line = serde_json::to_string(&o.record).expect("step record serializes");
            if let Err(e) = writeln!(log, "{line}") {
                write_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = write_err {
            return Err(e).context("writing step log");
        }
        log.flush()?;
        let step = trainer.state().step;
        if step % spe == 0 {
            // Read back from the log so epochs straddling a resume count fully.
            let mean = epoch_mean(&log_path, epoch)?;
            log::info!("epoch {epoch} mean L_total {mean:.4}");
            if best.map_or(true, |b| mean < b.mean_loss) {
                let b = Best { epoch, mean_loss: mean };
                trainer.checkpoint().save(&out.join(BEST_CKPT))?;
                fs::write(&best_path, serde_json::to_string(&b)?)?;
                best = Some(b);
            }
        }
        trainer.checkpoint().save(&out.join(LAST_CKPT))?;
    }
    if trainer.is_finished() {
        trainer.checkpoint().save(&out.join(FINAL_CKPT))?;
        let last = out.join(LAST_CKPT);
        if last.exists() {
            fs::remove_file(last)?;
        }
        println!("finished {} steps; final checkpoint {}", trainer.state().step, out.join(FINAL_CKPT).display());
    } else {
        println!(
            "stopped at step {}; resume with --resume {}",
            trainer.state().step,
            out.join(LAST_CKPT).display()
        );
    }
    Ok(())
}

fn epoch_mean(log_path: &Path, epoch: u64) -> Result<f64> {
    let text = fs::read_to_string(log_path)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for line in text.lines() {
        let r: StepRecord = serde_json::from_str(line)?;
        if r.epoch == epoch {
            sum += r.l_total;
            n += 1;
        }
    }
    Ok(sum / n.max(1) as f64)
}
