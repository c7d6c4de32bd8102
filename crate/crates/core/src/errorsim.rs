//! Report corruption simulating five kinds of human reporting error, with a
//! record of what was changed.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{self, parse_report, ClassId, FindingSpec, SyntheticStudy};
use crate::textpipe::words;

pub const CORRUPTED_SCHEMA: &str = "xvl-corrupted-corpus/1";

pub const LOCATION_ANTONYMS: [(&str, &str); 4] = [
    ("left", "right"),
    ("upper", "lower"),
    ("apical", "basal"),
    ("central", "peripheral"),
];

pub const EXTENT_ANTONYMS: [(&str, &str); 3] = [("mild", "severe"), ("small", "large"), ("minimal", "extensive")];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorType {
    Mismatch,
    Location,
    Extent,
    FalseNegative,
    FalsePositive,
    None,
}

impl ErrorType {
    /// Every type that changes a report.
    pub const INJECTED: [ErrorType; 5] = [
        ErrorType::Mismatch,
        ErrorType::Location,
        ErrorType::Extent,
        ErrorType::FalseNegative,
        ErrorType::FalsePositive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ErrorType::Mismatch => "mismatch",
            ErrorType::Location => "location",
            ErrorType::Extent => "extent",
            ErrorType::FalseNegative => "false_negative",
            ErrorType::FalsePositive => "false_positive",
            ErrorType::None => "none",
        }
    }
}

impl std::fmt::Display for ErrorType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ErrorType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ErrorType::INJECTED
            .iter()
            .chain(&[ErrorType::None])
            .find(|t| t.name() == s)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown error type `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub error_type: ErrorType,
    pub original: Vec<String>,
    pub corrupted: Vec<String>,
    /// Word positions (as split by [`words`]) that differ between the two
    /// reports, including any tail present in only one of them.
    pub positions: Vec<usize>,
    /// Study whose report was copied in.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_study_id: Option<String>,
    /// Set when an error was due but no type applied.
    #[serde(default)]
    pub inapplicable: bool,
}

impl ErrorRecord {
    fn clean(report: &[String], inapplicable: bool) -> Self {
        Self {
            error_type: ErrorType::None,
            original: report.to_vec(),
            corrupted: report.to_vec(),
            positions: Vec::new(),
            source_study_id: None,
            inapplicable,
        }
    }

    fn edited(error_type: ErrorType, original: &[String], corrupted: Vec<String>, source: Option<String>) -> Self {
        Self {
            error_type,
            positions: diff_positions(original, &corrupted),
            original: original.to_vec(),
            corrupted,
            source_study_id: source,
            inapplicable: false,
        }
    }
}

/// Word positions where two reports differ.
pub fn diff_positions<S: AsRef<str>>(a: &[S], b: &[S]) -> Vec<usize> {
    let join = |r: &[S]| r.iter().map(|s| s.as_ref()).collect::<Vec<_>>().join(" ");
    let wa = words(&join(a));
    let wb = words(&join(b));
    (0..wa.len().max(wb.len()))
        .filter(|&i| wa.get(i) != wb.get(i))
        .collect()
}

fn antonym(table: &[(&'static str, &'static str)], word: &str) -> Option<&'static str> {
    table.iter().find_map(|&(a, b)| {
        if word == a {
            Some(b)
        } else if word == b {
            Some(a)
        } else {
            None
        }
    })
}

/// Locations `(sentence, word)` of lexicon terms in a report.
fn term_sites<S: AsRef<str>>(report: &[S], table: &[(&'static str, &'static str)]) -> Vec<(usize, usize)> {
    let mut sites = Vec::new();
    for (si, s) in report.iter().enumerate() {
        for (wi, w) in s.as_ref().split(' ').enumerate() {
            let core = w.trim_end_matches(|c: char| c.is_ascii_punctuation()).to_lowercase();
            if antonym(table, &core).is_some() {
                sites.push((si, wi));
            }
        }
    }
    sites
}

fn match_case(template: &str, word: &str) -> String {
    if template.chars().next().is_some_and(char::is_uppercase) {
        let mut c = word.chars();
        c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
    } else {
        word.to_string()
    }
}

fn swap_term<S: AsRef<str>>(report: &[S], site: (usize, usize), table: &[(&'static str, &'static str)]) -> Vec<String> {
    report
        .iter()
        .enumerate()
        .map(|(si, s)| {
            if si != site.0 {
                return s.as_ref().to_string();
            }
            s.as_ref()
                .split(' ')
                .enumerate()
                .map(|(wi, w)| {
                    if wi != site.1 {
                        return w.to_string();
                    }
                    let core_len = w.trim_end_matches(|c: char| c.is_ascii_punctuation()).len();
                    let (core, tail) = w.split_at(core_len);
                    let repl = antonym(table, &core.to_lowercase()).expect("site holds a lexicon term");
                    format!("{}{tail}", match_case(core, repl))
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

fn inject_antonym<S: AsRef<str>, R: Rng + ?Sized>(
    report: &[S],
    table: &[(&'static str, &'static str)],
    rng: &mut R,
) -> Option<Vec<String>> {
    let sites = term_sites(report, table);
    let site = *sites.choose(rng)?;
    Some(swap_term(report, site, table))
}

/// Replaces one uniformly chosen location term by its antonym; `None` when
/// the report has no location term.
pub fn inject_location_error<S: AsRef<str>, R: Rng + ?Sized>(report: &[S], rng: &mut R) -> Option<Vec<String>> {
    inject_antonym(report, &LOCATION_ANTONYMS, rng)
}

/// Replaces one uniformly chosen extent term by its antonym; `None` when
/// the report has no extent term.
pub fn inject_extent_error<S: AsRef<str>, R: Rng + ?Sized>(report: &[S], rng: &mut R) -> Option<Vec<String>> {
    inject_antonym(report, &EXTENT_ANTONYMS, rng)
}

/// Label set as a bit mask over class ids.
fn label_mask(study: &SyntheticStudy) -> u64 {
    let m = study
        .findings
        .iter()
        .filter(|f| f.present)
        .fold(0, |m, f| m | 1 << f.class.index());
    if m == 0 {
        1 << ClassId::NO_FINDING.index()
    } else {
        m
    }
}

fn mismatch_pool<'c>(study: &SyntheticStudy, corpus: &'c [SyntheticStudy]) -> Vec<&'c SyntheticStudy> {
    let own = label_mask(study);
    corpus
        .iter()
        .filter(|o| o.study_id != study.study_id && label_mask(o) != own)
        .collect()
}

/// Report of a uniformly chosen study with a different label set.
pub fn inject_mismatch<'c, R: Rng + ?Sized>(
    study: &SyntheticStudy,
    corpus: &'c [SyntheticStudy],
    rng: &mut R,
) -> Option<&'c SyntheticStudy> {
    mismatch_pool(study, corpus).choose(rng).copied()
}

/// Abnormal report for a normal study: a class is drawn uniformly among the
/// abnormal primary classes in the corpus, then a study of that class.
pub fn inject_false_positive<'c, R: Rng + ?Sized>(
    study: &SyntheticStudy,
    corpus: &'c [SyntheticStudy],
    rng: &mut R,
) -> Option<&'c SyntheticStudy> {
    if !study.is_normal() {
        return None;
    }
    let classes: Vec<ClassId> = corpus
        .iter()
        .filter(|s| !s.is_normal())
        .map(SyntheticStudy::primary_class)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let class = *classes.choose(rng)?;
    let pool: Vec<&SyntheticStudy> = corpus.iter().filter(|s| s.primary_class() == class).collect();
    pool.choose(rng).copied()
}

/// Normal report for an abnormal study, drawn uniformly over normal studies.
pub fn inject_false_negative<'c, R: Rng + ?Sized>(
    study: &SyntheticStudy,
    corpus: &'c [SyntheticStudy],
    rng: &mut R,
) -> Option<&'c SyntheticStudy> {
    if study.is_normal() {
        return None;
    }
    let pool: Vec<&SyntheticStudy> = corpus.iter().filter(|s| s.is_normal()).collect();
    pool.choose(rng).copied()
}

/// Types that can be injected into `study` given `corpus`.
pub fn applicable_types(study: &SyntheticStudy, corpus: &[SyntheticStudy]) -> Vec<ErrorType> {
    let mut out = Vec::new();
    if !mismatch_pool(study, corpus).is_empty() {
        out.push(ErrorType::Mismatch);
    }
    if !term_sites(&study.report, &LOCATION_ANTONYMS).is_empty() {
        out.push(ErrorType::Location);
    }
    if !term_sites(&study.report, &EXTENT_ANTONYMS).is_empty() {
        out.push(ErrorType::Extent);
    }
    if !study.is_normal() && corpus.iter().any(SyntheticStudy::is_normal) {
        out.push(ErrorType::FalseNegative);
    }
    if study.is_normal() && corpus.iter().any(|s| !s.is_normal()) {
        out.push(ErrorType::FalsePositive);
    }
    out
}

/// Injects one error of the given type, or `None` when it does not apply.
pub fn inject<R: Rng + ?Sized>(
    kind: ErrorType,
    study: &SyntheticStudy,
    corpus: &[SyntheticStudy],
    rng: &mut R,
) -> Option<ErrorRecord> {
    let from = |s: &SyntheticStudy| (s.report.clone(), Some(s.study_id.clone()));
    let (corrupted, source) = match kind {
        ErrorType::None => return Some(ErrorRecord::clean(&study.report, false)),
        ErrorType::Mismatch => from(inject_mismatch(study, corpus, rng)?),
        ErrorType::FalsePositive => from(inject_false_positive(study, corpus, rng)?),
        ErrorType::FalseNegative => from(inject_false_negative(study, corpus, rng)?),
        ErrorType::Location => (inject_location_error(&study.report, rng)?, None),
        ErrorType::Extent => (inject_extent_error(&study.report, rng)?, None),
    };
    Some(ErrorRecord::edited(kind, &study.report, corrupted, source))
}

/// With probability `p` injects one error of a type drawn uniformly among
/// the applicable ones; otherwise returns an unchanged report.
pub fn corrupt<R: Rng + ?Sized>(
    study: &SyntheticStudy,
    corpus: &[SyntheticStudy],
    p: f64,
    rng: &mut R,
) -> Result<ErrorRecord> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("corruption probability must lie in [0, 1], got {p}")));
    }
    if !rng.gen_bool(p) {
        return Ok(ErrorRecord::clean(&study.report, false));
    }
    let types = applicable_types(study, corpus);
    let Some(&kind) = types.choose(rng) else {
        log::warn!("{}: no applicable error type", study.study_id);
        return Ok(ErrorRecord::clean(&study.report, true));
    };
    Ok(inject(kind, study, corpus, rng).expect("type was applicable"))
}

/// A study whose report may have been corrupted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptedStudy {
    #[serde(flatten)]
    pub study: SyntheticStudy,
    pub error: ErrorRecord,
}

/// Corrupts every study of `studies`, drawing replacement reports from
/// `corpus`. Images and ids are kept.
pub fn corrupt_corpus<R: Rng + ?Sized>(
    studies: &[SyntheticStudy],
    corpus: &[SyntheticStudy],
    p: f64,
    rng: &mut R,
) -> Result<Vec<CorruptedStudy>> {
    studies
        .iter()
        .map(|s| {
            let error = corrupt(s, corpus, p, rng)?;
            let mut study = s.clone();
            study.report = error.corrupted.clone();
            Ok(CorruptedStudy { study, error })
        })
        .collect()
}

pub fn write_corrupted<W: Write>(w: W, studies: &[CorruptedStudy]) -> Result<()> {
    synthdata::write_records(w, CORRUPTED_SCHEMA, studies)
}

pub fn read_corrupted<R: BufRead>(r: R) -> Result<Vec<CorruptedStudy>> {
    synthdata::read_records(r, CORRUPTED_SCHEMA)
}

/// Checks that re-labelling the corrupted report disagrees with the image's
/// findings exactly as the error type predicts.
pub fn relabel_consistent(truth: &[FindingSpec], record: &ErrorRecord) -> Result<bool> {
    let present = |f: &[FindingSpec]| -> Vec<FindingSpec> {
        let mut v: Vec<FindingSpec> = f.iter().filter(|x| x.present).copied().collect();
        v.sort_by_key(|x| x.class);
        v
    };
    let truth = present(truth);
    let seen = present(&parse_report(&record.corrupted)?);
    let classes = |v: &[FindingSpec]| v.iter().map(|f| f.class).collect::<Vec<_>>();
    let single_change = |differs: fn(&FindingSpec, &FindingSpec) -> bool, same: fn(&FindingSpec, &FindingSpec) -> bool| {
        classes(&truth) == classes(&seen)
            && truth.iter().zip(&seen).all(|(a, b)| same(a, b))
            && truth.iter().zip(&seen).filter(|(a, b)| differs(a, b)).count() == 1
    };
    Ok(match record.error_type {
        ErrorType::None => truth == seen,
        ErrorType::Mismatch => synthdata::label_set(&truth) != synthdata::label_set(&seen),
        ErrorType::FalsePositive => truth.is_empty() && !seen.is_empty(),
        ErrorType::FalseNegative => !truth.is_empty() && seen.is_empty(),
        ErrorType::Location => single_change(|a, b| a.location != b.location, |a, b| a.extent == b.extent),
        ErrorType::Extent => single_change(|a, b| a.extent != b.extent, |a, b| a.location == b.location),
    })
}
