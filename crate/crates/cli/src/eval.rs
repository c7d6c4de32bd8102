//! `eval-classify` and `eval-errors`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;
use serde_json::json;
use xvl_core::errorsim::{corrupt_corpus, ErrorType};
use xvl_core::metrics::{auc, bootstrap_ci, bootstrap_mean_ci, f1, format_table, MetricReport};
use xvl_core::seed;
use xvl_core::synthdata::{ClassId, Image, SyntheticStudy};
use xvl_core::zeroshot::{error_detection_by_type, PromptSet, ScoreMode, ScoreRecord};

use crate::manifest::{load_corpus, load_studies, write_jsonl, RunManifest};
use crate::{usage, ModelArgs};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.jsonl";
pub const SCORES_FILE: &str = "scores.jsonl";

#[derive(Args, Debug, Clone)]
pub struct BootArgs {
    /// Bootstrap resamples.
    #[arg(long, default_value_t = 1000)]
    pub n_boot: usize,
    /// Two-sided interval level is 1 − alpha.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Decision threshold for F1.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Studies to score (a corpus file, e.g. `<data>/test.jsonl`).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Prompt file (`gen-data` writes the default one as prompts.txt).
    #[arg(long)]
    pub prompts: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub boot: BootArgs,
}

/// One line of `metrics.jsonl`.
#[derive(Serialize)]
struct Record<'a> {
    group: &'a str,
    mode: &'a str,
    n_positive: usize,
    n_total: usize,
    #[serde(flatten)]
    report: &'a MetricReport,
}

type Metric = fn(&[f64], &[bool]) -> xvl_core::Result<f64>;

fn metric_fns(threshold: f64) -> [(&'static str, Box<dyn Fn(&[f64], &[bool]) -> xvl_core::Result<f64>>); 2] {
    [
        ("auc", Box::new(auc as Metric)),
        ("f1", Box::new(move |s: &[f64], l: &[bool]| f1(s, l, threshold))),
    ]
}

fn mode_name(m: ScoreMode) -> &'static str {
    match m {
        ScoreMode::Simple => "simple",
        ScoreMode::Detailed => "detailed",
        ScoreMode::Error => "error",
    }
}

/// Per-group reports and the joint-resampled mean, written as records and
/// printed as a table.
struct Collector {
    records: Vec<serde_json::Value>,
    summary: Vec<serde_json::Value>,
    table: Vec<(String, MetricReport)>,
}

impl Collector {
    fn new() -> Self {
        Self {
            records: Vec::new(),
            summary: Vec::new(),
            table: Vec::new(),
        }
    }

    /// `columns`: `(group, scores, labels)`.
    fn add(&mut self, mode: &str, columns: &[(String, Vec<f64>, Vec<bool>)], boot: &BootArgs) -> Result<()> {
        for (name, metric) in metric_fns(boot.threshold) {
            for (k, (group, s, l)) in columns.iter().enumerate() {
                let mut rng = seed::child_rng(boot.seed, k as u64);
                let b = bootstrap_ci(name, &metric, s, l, boot.n_boot, boot.alpha, &mut rng)
                    .with_context(|| format!("{group} ({mode}) {name}"))?;
                self.records.push(serde_json::to_value(Record {
                    group,
                    mode,
                    n_positive: l.iter().filter(|&&x| x).count(),
                    n_total: l.len(),
                    report: &b.report,
                })?);
                self.table.push((format!("{group}/{mode}"), b.report));
            }
            let scores: Vec<Vec<f64>> = columns.iter().map(|c| c.1.clone()).collect();
            let labels: Vec<Vec<bool>> = columns.iter().map(|c| c.2.clone()).collect();
            let mut rng = seed::child_rng(boot.seed, columns.len() as u64);
            let m = bootstrap_mean_ci(name, &metric, &scores, &labels, boot.n_boot, boot.alpha, &mut rng)
                .with_context(|| format!("mean ({mode}) {name}"))?;
            self.summary.push(serde_json::to_value(Record {
                group: "mean",
                mode,
                n_positive: labels.iter().flatten().filter(|&&x| x).count(),
                n_total: labels.iter().map(Vec::len).sum(),
                report: &m.report,
            })?);
            self.table.push((format!("mean/{mode}"), m.report));
        }
        Ok(())
    }

    fn finish(self, out: &Path) -> Result<()> {
        write_jsonl(&out.join(METRICS_FILE), &self.records)?;
        write_jsonl(&out.join(SUMMARY_FILE), &self.summary)?;
        print!("{}", format_table(&self.table));
        Ok(())
    }
}

fn boot_config(boot: &BootArgs) -> serde_json::Value {
    json!({ "n_boot": boot.n_boot, "alpha": boot.alpha, "threshold": boot.threshold })
}

fn check_boot(boot: &BootArgs) -> Result<()> {
    if boot.n_boot == 0 {
        return Err(usage("--n-boot must be positive"));
    }
    if !(boot.alpha > 0.0 && boot.alpha < 1.0) {
        return Err(usage("--alpha must lie in (0, 1)"));
    }
    Ok(())
}

pub fn run_classify(args: ClassifyArgs, argv: &[String]) -> Result<()> {
    check_boot(&args.boot)?;
    let text = fs::read_to_string(&args.prompts).with_context(|| format!("reading {}", args.prompts.display()))?;
    let prompts = PromptSet::parse(&text).with_context(|| format!("parsing {}", args.prompts.display()))?;
    let classes: Vec<ClassId> = ClassId::abnormal().collect();
    let missing: Vec<&str> = classes
        .iter()
        .map(|c| c.name())
        .filter(|c| prompts.get(c).is_err())
        .collect();
    if !missing.is_empty() {
        bail!(xvl_core::Error::Format(format!(
            "prompt file lacks classes: {}",
            missing.join(", ")
        )));
    }
    let corpus = load_corpus(&args.corpus)?;
    let loaded = args.model.load()?;
    let mut config = boot_config(&args.boot);
    config["score"] = json!(args.model.score);
    config["teacher"] = json!(args.model.teacher);
    RunManifest::new("eval-classify", argv, config, args.boot.seed)
        .input(&args.model.checkpoint)
        .input(&args.corpus)
        .input(&args.prompts)
        .output(args.out.join(METRICS_FILE))
        .output(args.out.join(SUMMARY_FILE))
        .output(args.out.join(SCORES_FILE))
        .write(&args.out)?;

    let scorer = loaded.scorer();
    let images: Vec<&Image> = corpus.iter().map(|s| &s.image).collect();
    let mut scores_out = Vec::new();
    let mut collector = Collector::new();
    for mode in [ScoreMode::Simple, ScoreMode::Detailed] {
        let mut columns = Vec::new();
        for &c in &classes {
            let s = scorer.classify_batch(&images, c.name(), &prompts, mode)?;
            let l: Vec<bool> = corpus.iter().map(|x| x.has_class(c)).collect();
            scores_out.extend(corpus.iter().zip(&s).map(|(st, &score)| ScoreRecord {
                study_id: st.study_id.clone(),
                class: c.name().to_string(),
                mode,
                score,
            }));
            columns.push((c.name().to_string(), s, l));
        }
        collector.add(mode_name(mode), &columns, &args.boot)?;
    }
    write_jsonl(&args.out.join(SCORES_FILE), &scores_out)?;
    collector.finish(&args.out)
}

#[derive(Args, Debug)]
pub struct ErrorArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// A corrupted set, or a plain corpus together with `--p`.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Corrupt a plain corpus on the fly with this per-study probability.
    #[arg(long)]
    pub p: Option<f64>,
    /// Inject every applicable error type into every study instead of
    /// sampling one corruption per study; clean reports are the negatives.
    #[arg(long, conflicts_with = "p")]
    pub exhaustive: bool,
    /// Pool that mismatch and false-positive/negative replacements are drawn
    /// from. Defaults to the scored corpus itself.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub boot: BootArgs,
}

/// Per-type bookkeeping: corrupted studies per type plus clean ones add up
/// to the corpus size.
#[derive(Serialize)]
struct Accounting {
    total: usize,
    clean: usize,
    by_type: BTreeMap<String, usize>,
}

pub fn run_errors(args: ErrorArgs, argv: &[String]) -> Result<()> {
    check_boot(&args.boot)?;
    if let Some(p) = args.p {
        if !(0.0..=1.0).contains(&p) {
            return Err(usage("--p must lie in [0, 1]"));
        }
    }
    let studies = load_studies(&args.corpus)?;
    let plain: Vec<SyntheticStudy> = studies.iter().map(|s| s.0.clone()).collect();
    let pool = match &args.pool {
        Some(p) => load_corpus(p)?,
        None => plain.clone(),
    };
    let loaded = args.model.load()?;
    let mut config = boot_config(&args.boot);
    config["p"] = json!(args.p);
    config["exhaustive"] = json!(args.exhaustive);
    config["score"] = json!(args.model.score);
    config["teacher"] = json!(args.model.teacher);
    let mut manifest = RunManifest::new("eval-errors", argv, config, args.boot.seed)
        .input(&args.model.checkpoint)
        .input(&args.corpus)
        .output(args.out.join(METRICS_FILE))
        .output(args.out.join(SUMMARY_FILE));
    if let Some(p) = &args.pool {
        manifest = manifest.input(p);
    }
    manifest.write(&args.out)?;
    let scorer = loaded.scorer();
    let mut rng = seed::child_rng(args.boot.seed, 1 << 32);

    let columns: Vec<(String, Vec<f64>, Vec<bool>)> = if args.exhaustive {
        if studies.iter().any(|s| s.1.is_some()) {
            return Err(usage("--exhaustive needs a plain corpus"));
        }
        error_detection_by_type(&scorer, &plain, &pool, &mut rng)?
            .into_iter()
            .map(|t| (t.error_type.to_string(), t.scores, t.labels))
            .collect()
    } else {
        let records: Vec<(SyntheticStudy, ErrorType)> = match args.p {
            Some(p) => {
                if studies.iter().any(|s| s.1.is_some()) {
                    return Err(usage("--p corrupts a plain corpus; this file is already corrupted"));
                }
                corrupt_corpus(&plain, &pool, p, &mut rng)?
                    .into_iter()
                    .map(|c| (c.study, c.error.error_type))
                    .collect()
            }
            None => studies
                .into_iter()
                .map(|(s, c)| {
                    c.map(|c| (s, c.error.error_type))
                        .ok_or_else(|| usage("plain corpus given; pass --p or a corrupted set"))
                })
                .collect::<Result<_>>()?,
        };
        let pairs: Vec<(&Image, &[String])> = records.iter().map(|(s, _)| (&s.image, s.report.as_slice())).collect();
        let scores = scorer.detect_error_batch(&pairs)?;
        let mut acct = Accounting {
            total: records.len(),
            clean: 0,
            by_type: BTreeMap::new(),
        };
        for (_, t) in &records {
            if *t == ErrorType::None {
                acct.clean += 1;
            } else {
                *acct.by_type.entry(t.to_string()).or_default() += 1;
            }
        }
        println!("accounting {}", serde_json::to_string(&acct)?);
        write_jsonl(&args.out.join("accounting.jsonl"), &[&acct])?;
        let mut cols = Vec::new();
        for t in ErrorType::INJECTED {
            let idx: Vec<usize> = (0..records.len())
                .filter(|&i| records[i].1 == t || records[i].1 == ErrorType::None)
                .collect();
            let labels: Vec<bool> = idx.iter().map(|&i| records[i].1 == t).collect();
            if !labels.iter().any(|&l| l) {
                log::warn!("no {t} errors in the set; skipped");
                continue;
            }
            cols.push((t.to_string(), idx.iter().map(|&i| scores[i]).collect(), labels));
        }
        if cols.is_empty() {
            bail!(xvl_core::Error::Metric(
                "no corrupted studies: error detection needs positives".into()
            ));
        }
        cols
    };
    let mut collector = Collector::new();
    collector.add("error", &columns, &args.boot)?;
    collector.finish(&args.out)
}
