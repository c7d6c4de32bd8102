//! `gen-data`.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde_json::json;
use xvl_core::synthdata::{generate_corpus, write_corpus, ClassMix, CLASS_NAMES, NUM_CLASSES};
use xvl_core::zeroshot::PromptSet;

use crate::manifest::RunManifest;
use crate::usage;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const PROMPTS_FILE: &str = "prompts.txt";

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of studies.
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use the first K classes ("no finding" first) with equal probability.
    #[arg(long, default_value_t = NUM_CLASSES, conflicts_with = "mix")]
    pub classes: usize,
    /// Explicit primary-class probabilities, comma separated, one per class.
    #[arg(long, value_delimiter = ',')]
    pub mix: Option<Vec<f64>>,
    /// Write into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

/// Split sizes for `n` studies: 80/10/10, remainder to test.
pub fn split_sizes(n: usize) -> [usize; 3] {
    let train = n * 8 / 10;
    let val = n / 10;
    [train, val, n - train - val]
}

fn class_mix(args: &GenDataArgs) -> Result<ClassMix> {
    let mut probs = [0.0; NUM_CLASSES];
    match &args.mix {
        Some(m) => {
            if m.len() != NUM_CLASSES {
                return Err(usage(format!(
                    "--mix needs {NUM_CLASSES} values ({}), got {}",
                    CLASS_NAMES.join(", "),
                    m.len()
                )));
            }
            probs.copy_from_slice(m);
        }
        None => {
            if !(2..=NUM_CLASSES).contains(&args.classes) {
                return Err(usage(format!("--classes must lie in 2..={NUM_CLASSES}")));
            }
            for p in probs.iter_mut().take(args.classes) {
                *p = 1.0 / args.classes as f64;
            }
        }
    }
    ClassMix::new(probs).map_err(|e| usage(e.to_string()))
}

pub fn run(args: GenDataArgs, argv: &[String]) -> Result<()> {
    let mix = class_mix(&args)?;
    if args.n == 0 {
        return Err(usage("--n must be positive"));
    }
    if args.out.exists() {
        let non_empty = fs::read_dir(&args.out)
            .with_context(|| format!("reading {}", args.out.display()))?
            .next()
            .is_some();
        if non_empty && !args.force {
            return Err(usage(format!(
                "{} is not empty; pass --force to overwrite",
                args.out.display()
            )));
        }
    }
    let mut manifest = RunManifest::new(
        "gen-data",
        argv,
        json!({ "n": args.n, "class_mix": mix.probs().to_vec(), "splits": split_sizes(args.n) }),
        args.seed,
    );
    for s in SPLITS {
        manifest = manifest.output(args.out.join(format!("{s}.jsonl")));
    }
    manifest = manifest.output(args.out.join(PROMPTS_FILE));
    manifest.write(&args.out)?;

    let corpus = generate_corpus(args.n, &mix, args.seed)?;
    let mut start = 0;
    for (name, size) in SPLITS.iter().zip(split_sizes(args.n)) {
        let path = args.out.join(format!("{name}.jsonl"));
        let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        write_corpus(BufWriter::new(f), &corpus[start..start + size])?;
        println!("{name:<5} {size:>6} studies -> {}", path.display());
        start += size;
    }
    fs::write(args.out.join(PROMPTS_FILE), PromptSet::synthetic_default().to_text())?;
    Ok(())
}
