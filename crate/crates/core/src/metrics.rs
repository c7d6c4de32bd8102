//! AUC, F1 and percentile-bootstrap confidence intervals.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-class resamples tolerated per requested resample before giving up.
pub const REDRAW_CAP_FACTOR: usize = 10;

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("scores contain NaN".into()));
    }
    Ok(())
}

fn has_both(labels: &[bool]) -> bool {
    labels.iter().any(|&l| l) && labels.iter().any(|&l| !l)
}

/// Area under the ROC curve as the normalised Mann–Whitney statistic, with
/// ties counted one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    if !has_both(labels) {
        return Err(Error::Metric("AUC needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average 1-based ranks over tie groups; doubled so they stay integral.
    let mut rank_sum2 = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let doubled = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum2 += doubled;
            }
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    let u2 = rank_sum2 - pos * (pos + 1);
    Ok(u2 as f64 / 2.0 / (pos * neg) as f64)
}

/// F1 with `score ≥ threshold` predicted positive. Zero when nothing is
/// predicted positive or there are no positives.
pub fn f1(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    check_inputs(scores, labels)?;
    if !threshold.is_finite() {
        return Err(Error::Metric(format!("threshold must be finite, got {threshold}")));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Highest F1 over thresholds at every distinct score, with the smallest
/// threshold attaining it.
pub fn best_f1(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    check_inputs(scores, labels)?;
    let mut cands: Vec<f64> = scores.to_vec();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    let mut best = (0.0, cands.first().copied().unwrap_or(0.5));
    for t in cands {
        let v = f1(scores, labels, t)?;
        if v > best.0 {
            best = (v, t);
        }
    }
    Ok(best)
}

/// Linear-interpolated percentile of ascending `sorted` at `q ∈ [0, 1]`:
/// position `q·(N−1)` between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let h = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub n_resamples: usize,
    pub alpha: f64,
    /// Single-class resamples that were discarded and redrawn.
    pub redraws: usize,
    /// Set when the percentile interval does not contain the estimate.
    pub estimate_outside: bool,
}

impl MetricReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metric report serializes")
    }
}

/// Bootstrap index sets, each the size of the original sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Resamples {
    pub indices: Vec<Vec<usize>>,
    pub redraws: usize,
}

/// Draws `n` resamples with replacement, redrawing any that lack one of the
/// two classes, up to `REDRAW_CAP_FACTOR · n` redraws.
pub fn draw_resamples(labels: &[bool], n: usize, rng: &mut ChaCha8Rng) -> Result<Resamples> {
    draw_resamples_capped(labels, n, REDRAW_CAP_FACTOR * n, rng)
}

pub fn draw_resamples_capped(labels: &[bool], n: usize, cap: usize, rng: &mut ChaCha8Rng) -> Result<Resamples> {
    if labels.is_empty() || n == 0 {
        return Err(Error::Metric("bootstrap needs samples and at least one resample".into()));
    }
    if !has_both(labels) {
        return Err(Error::Metric("bootstrap needs both positive and negative labels".into()));
    }
    let size = labels.len();
    let mut indices = Vec::with_capacity(n);
    let mut redraws = 0;
    while indices.len() < n {
        let idx: Vec<usize> = (0..size).map(|_| rng.gen_range(0..size)).collect();
        let pos = idx.iter().filter(|&&i| labels[i]).count();
        if pos == 0 || pos == size {
            redraws += 1;
            if redraws > cap {
                return Err(Error::Metric(format!(
                    "bootstrap redraw cap exceeded: {redraws} single-class resamples for {} accepted \
                     ({} positives of {size})",
                    indices.len(),
                    labels.iter().filter(|&&l| l).count()
                )));
            }
            continue;
        }
        indices.push(idx);
    }
    Ok(Resamples { indices, redraws })
}

/// Metric values plus the percentile interval.
#[derive(Clone, Debug, PartialEq)]
pub struct Bootstrap {
    pub report: MetricReport,
    /// Metric value of every resample, in draw order.
    pub samples: Vec<f64>,
}

fn interval(name: &str, estimate: f64, samples: &[f64], redraws: usize, alpha: f64) -> MetricReport {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lower = percentile(&sorted, alpha / 2.0);
    let upper = percentile(&sorted, 1.0 - alpha / 2.0);
    MetricReport {
        metric: name.to_string(),
        estimate,
        lower,
        upper,
        n_resamples: samples.len(),
        alpha,
        redraws,
        estimate_outside: estimate < lower || estimate > upper,
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Metric(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// Percentile bootstrap of `metric` over (score, label) pairs.
pub fn bootstrap_ci<M>(
    name: &str,
    metric: M,
    scores: &[f64],
    labels: &[bool],
    n: usize,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Bootstrap>
where
    M: Fn(&[f64], &[bool]) -> Result<f64>,
{
    check_inputs(scores, labels)?;
    check_alpha(alpha)?;
    let estimate = metric(scores, labels)?;
    let draws = draw_resamples(labels, n, rng)?;
    let mut s = Vec::with_capacity(scores.len());
    let mut l = Vec::with_capacity(scores.len());
    let mut samples = Vec::with_capacity(n);
    for idx in &draws.indices {
        s.clear();
        l.clear();
        s.extend(idx.iter().map(|&i| scores[i]));
        l.extend(idx.iter().map(|&i| labels[i]));
        samples.push(metric(&s, &l)?);
    }
    let report = interval(name, estimate, &samples, draws.redraws, alpha);
    Ok(Bootstrap { report, samples })
}

/// Bootstrap of the mean of `metric` over several score/label columns.
/// Columns of equal length are taken to score the same samples and are
/// resampled jointly; otherwise each column is resampled on its own within
/// every replicate. A replicate is redrawn when any column loses a class.
pub fn bootstrap_mean_ci<M>(
    name: &str,
    metric: M,
    scores: &[Vec<f64>],
    labels: &[Vec<bool>],
    n: usize,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Bootstrap>
where
    M: Fn(&[f64], &[bool]) -> Result<f64>,
{
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Metric("need one label column per score column".into()));
    }
    for (s, l) in scores.iter().zip(labels) {
        check_inputs(s, l)?;
        if !has_both(l) {
            return Err(Error::Metric("bootstrap needs both positive and negative labels".into()));
        }
    }
    check_alpha(alpha)?;
    if n == 0 {
        return Err(Error::Metric("bootstrap needs at least one resample".into()));
    }
    let joint = labels.iter().all(|l| l.len() == labels[0].len());
    let estimate = scores.iter().zip(labels).map(|(s, l)| metric(s, l)).sum::<Result<f64>>()? / scores.len() as f64;
    let cap = REDRAW_CAP_FACTOR * n;
    let mut samples = Vec::with_capacity(n);
    let mut redraws = 0;
    while samples.len() < n {
        let shared: Vec<usize> = if joint {
            let size = labels[0].len();
            (0..size).map(|_| rng.gen_range(0..size)).collect()
        } else {
            Vec::new()
        };
        let draws: Vec<Vec<usize>> = labels
            .iter()
            .map(|l| {
                if joint {
                    shared.clone()
                } else {
                    (0..l.len()).map(|_| rng.gen_range(0..l.len())).collect()
                }
            })
            .collect();
        let degenerate = labels.iter().zip(&draws).any(|(l, idx)| {
            let pos = idx.iter().filter(|&&i| l[i]).count();
            pos == 0 || pos == idx.len()
        });
        if degenerate {
            redraws += 1;
            if redraws > cap {
                return Err(Error::Metric(format!("bootstrap redraw cap exceeded after {redraws} redraws")));
            }
            continue;
        }
        let mut total = 0.0;
        for ((s, l), idx) in scores.iter().zip(labels).zip(&draws) {
            let rs: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
            let rl: Vec<bool> = idx.iter().map(|&i| l[i]).collect();
            total += metric(&rs, &rl)?;
        }
        samples.push(total / scores.len() as f64);
    }
    let report = interval(name, estimate, &samples, redraws, alpha);
    Ok(Bootstrap { report, samples })
}

/// Scores of one model over identified samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    /// Bootstrap interval of `metric(a) − metric(b)` over shared resamples.
    pub difference: MetricReport,
    pub significant: bool,
}

/// Paired bootstrap comparison: significant iff the interval of the
/// difference excludes zero.
pub fn significance<M>(
    name: &str,
    metric: M,
    a: &ScoredSet,
    b: &ScoredSet,
    n: usize,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Significance>
where
    M: Fn(&[f64], &[bool]) -> Result<f64>,
{
    check_inputs(&a.scores, &a.labels)?;
    check_inputs(&b.scores, &b.labels)?;
    check_alpha(alpha)?;
    if a.ids != b.ids || a.ids.len() != a.scores.len() {
        return Err(Error::Metric("paired comparison needs the same sample ids in the same order".into()));
    }
    if a.labels != b.labels {
        return Err(Error::Metric("paired comparison needs identical labels".into()));
    }
    let estimate = metric(&a.scores, &a.labels)? - metric(&b.scores, &b.labels)?;
    let draws = draw_resamples(&a.labels, n, rng)?;
    let mut samples = Vec::with_capacity(n);
    for idx in &draws.indices {
        let l: Vec<bool> = idx.iter().map(|&i| a.labels[i]).collect();
        let sa: Vec<f64> = idx.iter().map(|&i| a.scores[i]).collect();
        let sb: Vec<f64> = idx.iter().map(|&i| b.scores[i]).collect();
        samples.push(metric(&sa, &l)? - metric(&sb, &l)?);
    }
    let difference = interval(&format!("{name} difference"), estimate, &samples, draws.redraws, alpha);
    let significant = difference.lower > 0.0 || difference.upper < 0.0;
    Ok(Significance { difference, significant })
}

/// Fixed-width table, one row per `(label, report)`.
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:<8} {:>8} {:>8} {:>8}", "label", "metric", "value", "lower", "upper");
    for (label, r) in rows {
        let flag = if r.estimate_outside { " *" } else { "" };
        let _ = writeln!(
            out,
            "{label:<width$}  {:<8} {:>8.4} {:>8.4} {:>8.4}{flag}",
            r.metric, r.estimate, r.lower, r.upper
        );
    }
    out
}
