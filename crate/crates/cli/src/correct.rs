//! `correct`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use serde::Serialize;
use serde_json::json;

use crate::manifest::{load_studies, write_jsonl, RunManifest};
use crate::{usage, ModelArgs};

#[derive(Args, Debug)]
pub struct CorrectArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Plain corpus or corrupted set.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Minimum MLM probability for a replacement.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct Corrected<'a> {
    study_id: &'a str,
    report: &'a [String],
    corrected: &'a [String],
    n_substitutions: usize,
    /// Only for corrupted sets: whether the correction equals the report
    /// before corruption.
    #[serde(skip_serializing_if = "Option::is_none")]
    restored: Option<bool>,
}

#[derive(Serialize)]
struct SubstitutionLine<'a> {
    study_id: &'a str,
    position: usize,
    old: &'a str,
    new: &'a str,
    prob: f64,
}

pub fn run(args: CorrectArgs, argv: &[String]) -> Result<()> {
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(usage("--threshold must lie in [0, 1]"));
    }
    let studies = load_studies(&args.corpus)?;
    let loaded = args.model.load()?;
    RunManifest::new(
        "correct",
        argv,
        json!({ "threshold": args.threshold, "score": args.model.score, "teacher": args.model.teacher }),
        0,
    )
    .input(&args.model.checkpoint)
    .input(&args.corpus)
    .output(args.out.join("corrected.jsonl"))
    .output(args.out.join("substitutions.jsonl"))
    .write(&args.out)?;

    let scorer = loaded.scorer();
    let mut corrections = Vec::with_capacity(studies.len());
    for (s, _) in &studies {
        corrections.push(scorer.correct_report(&s.image, &s.report, args.threshold)?);
    }
    let mut lines = Vec::new();
    let mut subs = Vec::new();
    // error type -> (restored, total)
    let mut by_type: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for ((s, c), fix) in studies.iter().zip(&corrections) {
        let restored = c.as_ref().map(|c| fix.report == c.error.original);
        if let (Some(c), Some(r)) = (c, restored) {
            let e = by_type.entry(c.error.error_type.to_string()).or_default();
            e.0 += usize::from(r);
            e.1 += 1;
        }
        lines.push(Corrected {
            study_id: &s.study_id,
            report: &s.report,
            corrected: &fix.report,
            n_substitutions: fix.substitutions.len(),
            restored,
        });
        subs.extend(fix.substitutions.iter().map(|x| SubstitutionLine {
            study_id: &s.study_id,
            position: x.position,
            old: &x.old,
            new: &x.new,
            prob: x.prob,
        }));
    }
    write_jsonl(&args.out.join("corrected.jsonl"), &lines)?;
    write_jsonl(&args.out.join("substitutions.jsonl"), &subs)?;
    let changed = lines.iter().filter(|l| l.n_substitutions > 0).count();
    println!("{} reports, {changed} changed, {} substitutions", lines.len(), subs.len());
    if !by_type.is_empty() {
        println!("{:<16} {:>6} {:>9}", "error type", "n", "restored");
        for (t, (r, n)) in &by_type {
            println!("{t:<16} {n:>6} {:>9.3}", *r as f64 / *n as f64);
        }
    }
    Ok(())
}
