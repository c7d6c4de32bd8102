//! Deterministic synthetic image-report corpus.
//!
//! Each study is a small grayscale grid with one geometric marker per present
//! finding, drawn in the quadrant named by the finding's location and sized
//! by its extent, paired with a report generated from a fixed grammar:
//!
//! ```text
//! There is {extent} {class} in the {side} {zone} zone.
//! No evidence of {class}.
//! ```
//!
//! Because the generator knows the ground truth, every downstream zero-shot
//! claim can be scored exactly.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Schema line written at the top of every corpus file.
pub const CORPUS_SCHEMA: &str = "xvl-synthetic-corpus/1";

pub const CLASS_NAMES: [&str; 6] = ["no finding", "alpha", "beta", "gamma", "delta", "epsilon"];
pub const NUM_CLASSES: usize = CLASS_NAMES.len();

/// Intensity separating markers from background noise.
pub const MARKER_THRESHOLD: f32 = 0.5;
const NOISE_MAX: f32 = 0.2;
const MARKER_MIN: f32 = 0.7;
const MARKER_MAX: f32 = 1.0;

/// Finding class; `0` is "no finding", `1..=5` are abnormal classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassId(pub u8);

impl ClassId {
    pub const NO_FINDING: ClassId = ClassId(0);

    pub fn abnormal() -> impl Iterator<Item = ClassId> {
        (1..NUM_CLASSES as u8).map(ClassId)
    }

    pub fn is_abnormal(self) -> bool {
        self.0 != 0
    }

    pub fn name(self) -> &'static str {
        CLASS_NAMES[self.0 as usize]
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CLASS_NAMES
            .iter()
            .position(|n| n.eq_ignore_ascii_case(s.trim()))
            .map(|i| ClassId(i as u8))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown class {s:?}")))
    }
}

impl Serialize for ClassId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ClassId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Zone {
    Upper,
    Lower,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Location {
    pub side: Side,
    pub zone: Zone,
}

impl Location {
    pub const ALL: [Location; 4] = [
        Location::new(Side::Left, Zone::Upper),
        Location::new(Side::Right, Zone::Upper),
        Location::new(Side::Left, Zone::Lower),
        Location::new(Side::Right, Zone::Lower),
    ];

    pub const fn new(side: Side, zone: Zone) -> Self {
        Self { side, zone }
    }

    /// Pixel rectangle `(row0, col0)` of the quadrant in an `h × w` image;
    /// the image is viewed from the front, so "left" is the left half.
    pub fn origin(self, height: usize, width: usize) -> (usize, usize) {
        let r = match self.zone {
            Zone::Upper => 0,
            Zone::Lower => height / 2,
        };
        let c = match self.side {
            Side::Left => 0,
            Side::Right => width / 2,
        };
        (r, c)
    }

    pub fn of_pixel(row: f64, col: f64, height: usize, width: usize) -> Location {
        let zone = if row < height as f64 / 2.0 {
            Zone::Upper
        } else {
            Zone::Lower
        };
        let side = if col < width as f64 / 2.0 {
            Side::Left
        } else {
            Side::Right
        };
        Location { side, zone }
    }

    pub fn words(self) -> (&'static str, &'static str) {
        let s = match self.side {
            Side::Left => "left",
            Side::Right => "right",
        };
        let z = match self.zone {
            Zone::Upper => "upper",
            Zone::Lower => "lower",
        };
        (s, z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extent {
    Small,
    Large,
}

impl Extent {
    pub const ALL: [Extent; 2] = [Extent::Small, Extent::Large];

    pub fn word(self) -> &'static str {
        match self {
            Extent::Small => "small",
            Extent::Large => "large",
        }
    }
}

/// One finding of a study.
///
/// A present finding carries a location and an extent; an absent finding
/// carries neither and is only used for the negation sentence of a study
/// without present findings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FindingSpec {
    pub class: ClassId,
    pub present: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<Location>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extent: Option<Extent>,
}

impl FindingSpec {
    pub fn present(class: ClassId, location: Location, extent: Extent) -> Self {
        Self {
            class,
            present: true,
            location: Some(location),
            extent: Some(extent),
        }
    }

    pub fn absent(class: ClassId) -> Self {
        Self {
            class,
            present: false,
            location: None,
            extent: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.present {
            if !self.class.is_abnormal() {
                return Err(Error::InvalidFindings(
                    "\"no finding\" cannot be present".into(),
                ));
            }
            if self.location.is_none() || self.extent.is_none() {
                return Err(Error::InvalidFindings(format!(
                    "present {} finding needs a location and an extent",
                    self.class
                )));
            }
        } else if self.location.is_some() || self.extent.is_some() {
            return Err(Error::InvalidFindings(format!(
                "absent {} finding must not carry a location or extent",
                self.class
            )));
        }
        Ok(())
    }
}

/// Checks the mutual consistency rules of a finding list.
pub fn validate_findings(findings: &[FindingSpec]) -> Result<()> {
    let mut used = BTreeSet::new();
    let mut present = 0;
    let mut absent = 0;
    for f in findings {
        f.validate()?;
        if f.present {
            present += 1;
            let loc = f.location.expect("validated");
            if !used.insert(loc) {
                let (s, z) = loc.words();
                return Err(Error::InvalidFindings(format!(
                    "two findings assigned to the {s} {z} quadrant"
                )));
            }
        } else {
            absent += 1;
        }
    }
    if absent > 1 || (absent > 0 && present > 0) {
        return Err(Error::InvalidFindings(
            "an absent finding may only appear alone".into(),
        ));
    }
    Ok(())
}

/// Row-major grayscale grid with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.width + c] = v;
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::MIN, f32::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStudy {
    pub study_id: String,
    pub image: Image,
    pub report: Vec<String>,
    pub findings: Vec<FindingSpec>,
}

impl SyntheticStudy {
    /// Class of the first present finding, or "no finding".
    pub fn primary_class(&self) -> ClassId {
        self.findings
            .iter()
            .find(|f| f.present)
            .map_or(ClassId::NO_FINDING, |f| f.class)
    }

    /// Set of present classes; `{no finding}` when nothing is present.
    pub fn label_set(&self) -> BTreeSet<ClassId> {
        label_set(&self.findings)
    }

    pub fn has_class(&self, class: ClassId) -> bool {
        self.findings.iter().any(|f| f.present && f.class == class)
    }

    pub fn is_normal(&self) -> bool {
        !self.findings.iter().any(|f| f.present)
    }

    pub fn report_text(&self) -> String {
        self.report.join(" ")
    }
}

pub fn label_set(findings: &[FindingSpec]) -> BTreeSet<ClassId> {
    let set: BTreeSet<ClassId> = findings
        .iter()
        .filter(|f| f.present)
        .map(|f| f.class)
        .collect();
    if set.is_empty() {
        BTreeSet::from([ClassId::NO_FINDING])
    } else {
        set
    }
}

/// Rendering geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    /// Maximum marker offset from the quadrant centre, in pixels.
    pub jitter: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            jitter: 1,
        }
    }
}

impl RenderConfig {
    /// The full-resolution layout (224 × 224).
    pub fn full_resolution() -> Self {
        Self {
            height: 224,
            width: 224,
            jitter: 4,
        }
    }

    fn quadrant(&self) -> usize {
        (self.height / 2).min(self.width / 2)
    }

    pub fn marker_size(&self, extent: Extent) -> usize {
        let q = self.quadrant();
        match extent {
            Extent::Large => q * 3 / 4,
            Extent::Small => (q * 3 / 8).max(2),
        }
    }
}

/// Boolean stencil of the marker for `class` at side length `size`.
pub fn marker_stencil(class: ClassId, size: usize) -> Vec<bool> {
    let band = (size / 3).max(2).min(size);
    let lo = (size - band) / 2;
    let in_band = |i: usize| i >= lo && i < lo + band;
    let frame = (size / 6).max(1);
    let mut out = vec![false; size * size];
    for r in 0..size {
        for c in 0..size {
            out[r * size + c] = match class.0 {
                1 => true,
                2 => r < frame || c < frame || r >= size - frame || c >= size - frame,
                3 => in_band(r) || in_band(c),
                4 => in_band(r),
                5 => in_band(c),
                _ => false,
            };
        }
    }
    out
}

/// Draws the image for a finding list. Background noise is uniform in
/// `[0, 0.2)`; every marker has a single intensity drawn from `[0.7, 1.0]`.
pub fn render_image(findings: &[FindingSpec], rng_seed: u64) -> Result<Image> {
    render_image_with(&RenderConfig::default(), findings, rng_seed)
}

pub fn render_image_with(
    config: &RenderConfig,
    findings: &[FindingSpec],
    rng_seed: u64,
) -> Result<Image> {
    validate_findings(findings)?;
    let mut rng = seed::rng(rng_seed);
    let (h, w) = (config.height, config.width);
    let mut img = Image::zeros(h, w);
    for v in &mut img.data {
        *v = rng.gen_range(0.0..NOISE_MAX);
    }
    let q = config.quadrant();
    for f in findings.iter().filter(|f| f.present) {
        let (loc, extent) = (f.location.expect("validated"), f.extent.expect("validated"));
        let size = config.marker_size(extent);
        let stencil = marker_stencil(f.class, size);
        let intensity: f32 = rng.gen_range(MARKER_MIN..=MARKER_MAX);
        let slack = (q - size) / 2;
        let max_jitter = config.jitter.min(slack.saturating_sub(1)) as i64;
        let dr = rng.gen_range(-max_jitter..=max_jitter);
        let dc = rng.gen_range(-max_jitter..=max_jitter);
        let (r0, c0) = loc.origin(h, w);
        let top = (r0 + slack) as i64 + dr;
        let left = (c0 + slack) as i64 + dc;
        for sr in 0..size {
            for sc in 0..size {
                if stencil[sr * size + sc] {
                    img.set((top + sr as i64) as usize, (left + sc as i64) as usize, intensity);
                }
            }
        }
    }
    Ok(img)
}

/// Report sentences for a finding list.
pub fn report_for(findings: &[FindingSpec]) -> Vec<String> {
    let present: Vec<&FindingSpec> = findings.iter().filter(|f| f.present).collect();
    if present.is_empty() {
        let negated = findings.iter().find(|f| f.class.is_abnormal());
        return vec![match negated {
            Some(f) => format!("No evidence of {}.", f.class),
            None => "No acute abnormality.".to_string(),
        }];
    }
    present
        .iter()
        .map(|f| {
            let (side, zone) = f.location.expect("present").words();
            format!(
                "There is {} {} in the {side} {zone} zone.",
                f.extent.expect("present").word(),
                f.class
            )
        })
        .collect()
}

/// Builds one study. Deterministic in `(rng_seed, findings)`.
pub fn generate_study(rng_seed: u64, findings: &[FindingSpec]) -> Result<SyntheticStudy> {
    generate_study_with(&RenderConfig::default(), rng_seed, findings)
}

pub fn generate_study_with(
    config: &RenderConfig,
    rng_seed: u64,
    findings: &[FindingSpec],
) -> Result<SyntheticStudy> {
    let image = render_image_with(config, findings, rng_seed)?;
    Ok(SyntheticStudy {
        study_id: format!("study-{rng_seed:016x}"),
        image,
        report: report_for(findings),
        findings: findings.to_vec(),
    })
}

/// Probability of each class being a study's primary class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMix {
    probs: [f64; NUM_CLASSES],
}

impl ClassMix {
    pub fn new(probs: [f64; NUM_CLASSES]) -> Result<Self> {
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::InvalidClassMix(format!("probability {p} is negative or non-finite")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidClassMix(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn uniform() -> Self {
        Self {
            probs: [1.0 / NUM_CLASSES as f64; NUM_CLASSES],
        }
    }

    pub fn probs(&self) -> &[f64; NUM_CLASSES] {
        &self.probs
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> ClassId {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return ClassId(i as u8);
            }
        }
        // rounding slack: last class with nonzero mass
        let last = self.probs.iter().rposition(|p| *p > 0.0).unwrap_or(0);
        ClassId(last as u8)
    }
}

impl Default for ClassMix {
    fn default() -> Self {
        Self::uniform()
    }
}

/// Corpus-level generation knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub render: RenderConfig,
    /// Chance that an abnormal study gets a second finding of another class.
    pub secondary_prob: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            render: RenderConfig::default(),
            secondary_prob: 0.2,
        }
    }
}

/// Generates `n` studies whose primary classes follow `class_mix`.
pub fn generate_corpus(n: usize, class_mix: &ClassMix, rng_seed: u64) -> Result<Vec<SyntheticStudy>> {
    generate_corpus_with(&CorpusConfig::default(), n, class_mix, rng_seed)
}

pub fn generate_corpus_with(
    config: &CorpusConfig,
    n: usize,
    class_mix: &ClassMix,
    rng_seed: u64,
) -> Result<Vec<SyntheticStudy>> {
    let abnormal: Vec<ClassId> = ClassId::abnormal().collect();
    (0..n)
        .map(|i| {
            let mut rng = seed::child_rng(rng_seed, i as u64);
            let primary = class_mix.sample(&mut rng);
            let findings = if primary.is_abnormal() {
                let mut locs = Location::ALL;
                locs.shuffle(&mut rng);
                let mut fs = vec![FindingSpec::present(primary, locs[0], random_extent(&mut rng))];
                if rng.gen_bool(config.secondary_prob) {
                    let others: Vec<ClassId> =
                        abnormal.iter().copied().filter(|c| *c != primary).collect();
                    let second = *others.choose(&mut rng).expect("at least two abnormal classes");
                    fs.push(FindingSpec::present(second, locs[1], random_extent(&mut rng)));
                }
                fs
            } else {
                vec![FindingSpec::absent(*abnormal.choose(&mut rng).expect("abnormal classes"))]
            };
            let image_seed: u64 = rng.gen();
            let mut study = generate_study_with(&config.render, image_seed, &findings)?;
            study.study_id = format!("study-{i:06}");
            Ok(study)
        })
        .collect()
}

fn random_extent<R: Rng>(rng: &mut R) -> Extent {
    if rng.gen_bool(0.5) {
        Extent::Large
    } else {
        Extent::Small
    }
}

/// Rule-based inverse of [`report_for`]; recovers the finding list from
/// grammar sentences. Used to verify generated and corrupted reports.
pub fn parse_report<S: AsRef<str>>(sentences: &[S]) -> Result<Vec<FindingSpec>> {
    let mut out = Vec::new();
    for s in sentences {
        let words: Vec<String> = s
            .as_ref()
            .trim()
            .trim_end_matches('.')
            .split_whitespace()
            .map(str::to_lowercase)
            .collect();
        let w: Vec<&str> = words.iter().map(String::as_str).collect();
        match w.as_slice() {
            ["there", "is", extent, class, "in", "the", side, zone, "zone"] => {
                let extent = match *extent {
                    "small" => Extent::Small,
                    "large" => Extent::Large,
                    other => return Err(Error::Format(format!("unknown extent {other:?}"))),
                };
                let side = match *side {
                    "left" => Side::Left,
                    "right" => Side::Right,
                    other => return Err(Error::Format(format!("unknown side {other:?}"))),
                };
                let zone = match *zone {
                    "upper" => Zone::Upper,
                    "lower" => Zone::Lower,
                    other => return Err(Error::Format(format!("unknown zone {other:?}"))),
                };
                out.push(FindingSpec::present(
                    class.parse()?,
                    Location::new(side, zone),
                    extent,
                ));
            }
            ["no", "evidence", "of", class] => out.push(FindingSpec::absent(class.parse()?)),
            ["no", "acute", "abnormality"] => {}
            _ => {
                return Err(Error::Format(format!(
                    "sentence outside the report grammar: {:?}",
                    s.as_ref()
                )))
            }
        }
    }
    Ok(out)
}

// ----- line-delimited serialization ------------------------------------------

/// Writes `schema` on the first line and one JSON object per record after it.
pub fn write_records<W: Write, T: Serialize>(mut w: W, schema: &str, records: &[T]) -> Result<()> {
    writeln!(w, "{schema}")?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file produced by [`write_records`], checking the schema line.
pub fn read_records<R: BufRead, T: DeserializeOwned>(r: R, schema: &str) -> Result<Vec<T>> {
    let mut lines = r.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Format("empty file, expected schema line".into()))??;
    if first.trim() != schema {
        return Err(Error::Format(format!(
            "schema mismatch: found {:?}, expected {schema:?}",
            first.trim()
        )));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("record {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_corpus<W: Write>(w: W, corpus: &[SyntheticStudy]) -> Result<()> {
    write_records(w, CORPUS_SCHEMA, corpus)
}

pub fn read_corpus<R: BufRead>(r: R) -> Result<Vec<SyntheticStudy>> {
    read_records(r, CORPUS_SCHEMA)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lu_large(class: u8) -> FindingSpec {
        FindingSpec::present(
            ClassId(class),
            Location::new(Side::Left, Zone::Upper),
            Extent::Large,
        )
    }

    /// Pixels above threshold, scanned independently of the renderer.
    fn bright_pixels(img: &Image) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..img.height {
            for c in 0..img.width {
                if img.get(r, c) > MARKER_THRESHOLD {
                    out.push((r, c));
                }
            }
        }
        out
    }

    /// 4-connected components above threshold, by flood fill.
    fn components(img: &Image) -> Vec<Vec<(usize, usize)>> {
        let (h, w) = (img.height, img.width);
        let mut seen = vec![false; h * w];
        let mut comps = Vec::new();
        for (r, c) in bright_pixels(img) {
            if seen[r * w + c] {
                continue;
            }
            let mut stack = vec![(r, c)];
            seen[r * w + c] = true;
            let mut comp = Vec::new();
            while let Some((y, x)) = stack.pop() {
                comp.push((y, x));
                let nbrs = [
                    (y.wrapping_sub(1), x),
                    (y + 1, x),
                    (y, x.wrapping_sub(1)),
                    (y, x + 1),
                ];
                for (ny, nx) in nbrs {
                    if ny < h && nx < w && !seen[ny * w + nx] && img.get(ny, nx) > MARKER_THRESHOLD {
                        seen[ny * w + nx] = true;
                        stack.push((ny, nx));
                    }
                }
            }
            comps.push(comp);
        }
        comps
    }

    #[test]
    fn empty_spec_is_noise_with_one_negation() {
        let s = generate_study(0, &[]).unwrap();
        assert!(s.image.max() < MARKER_THRESHOLD);
        assert!(s.image.max() < NOISE_MAX);
        assert_eq!(s.report.len(), 1);
        assert!(s.report[0].starts_with("No "));
    }

    #[test]
    fn study_generation_is_deterministic() {
        let spec = [lu_large(3)];
        assert_eq!(generate_study(5, &spec).unwrap(), generate_study(5, &spec).unwrap());
    }

    #[test]
    fn marker_centroid_lies_in_named_quadrant() {
        let s = generate_study(0, &[lu_large(1)]).unwrap();
        let px = bright_pixels(&s.image);
        assert!(!px.is_empty());
        let n = px.len() as f64;
        let cr = px.iter().map(|p| p.0 as f64).sum::<f64>() / n;
        let cc = px.iter().map(|p| p.1 as f64).sum::<f64>() / n;
        assert!(cr < 16.0 && cc < 16.0, "centroid ({cr}, {cc})");
    }

    #[test]
    fn conflicting_quadrants_are_rejected() {
        let err = generate_study(0, &[lu_large(1), lu_large(2)]).unwrap_err();
        assert!(err.to_string().contains("left upper"));
    }

    #[test]
    fn inconsistent_findings_are_rejected() {
        let mut f = lu_large(1);
        f.location = None;
        assert!(validate_findings(&[f]).is_err());
        assert!(validate_findings(&[FindingSpec {
            class: ClassId::NO_FINDING,
            present: true,
            location: Some(Location::ALL[0]),
            extent: Some(Extent::Small),
        }])
        .is_err());
        assert!(validate_findings(&[lu_large(1), FindingSpec::absent(ClassId(2))]).is_err());
    }

    #[test]
    fn larger_extent_lights_more_pixels() {
        for class in 1..=5 {
            let mut small = lu_large(class);
            small.extent = Some(Extent::Small);
            let big = render_image(&[lu_large(class)], 9).unwrap();
            let little = render_image(&[small], 9).unwrap();
            assert!(
                bright_pixels(&big).len() > bright_pixels(&little).len(),
                "class {class}"
            );
        }
    }

    #[test]
    fn empty_render_stays_below_threshold() {
        assert!(render_image(&[], 3).unwrap().max() < MARKER_THRESHOLD);
    }

    #[test]
    fn two_findings_give_two_components() {
        for class in 1..=5u8 {
            let other = if class == 5 { 1 } else { class + 1 };
            let spec = [
                lu_large(class),
                FindingSpec::present(
                    ClassId(other),
                    Location::new(Side::Right, Zone::Lower),
                    Extent::Small,
                ),
            ];
            let img = render_image(&spec, 4).unwrap();
            let comps = components(&img);
            assert_eq!(comps.len(), 2, "class {class}");
            let quads: BTreeSet<Location> = comps
                .iter()
                .map(|c| {
                    let (y, x) = c[0];
                    Location::of_pixel(y as f64, x as f64, 32, 32)
                })
                .collect();
            assert_eq!(quads.len(), 2);
        }
    }

    #[test]
    fn empty_corpus_is_valid() {
        assert!(generate_corpus(0, &ClassMix::uniform(), 0).unwrap().is_empty());
    }

    #[test]
    fn corpus_is_reproducible_and_ids_unique() {
        let a = generate_corpus(2, &ClassMix::uniform(), 11).unwrap();
        let b = generate_corpus(2, &ClassMix::uniform(), 11).unwrap();
        assert_eq!(a, b);
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        write_corpus(&mut ba, &a).unwrap();
        write_corpus(&mut bb, &b).unwrap();
        assert_eq!(ba, bb);
        let c = generate_corpus(50, &ClassMix::uniform(), 11).unwrap();
        let ids: BTreeSet<&str> = c.iter().map(|s| s.study_id.as_str()).collect();
        assert_eq!(ids.len(), 50);
    }

    #[test]
    fn class_frequencies_follow_the_mix() {
        let corpus = generate_corpus(10_000, &ClassMix::uniform(), 1).unwrap();
        let mut counts = [0usize; NUM_CLASSES];
        for s in &corpus {
            let cls = s
                .findings
                .iter()
                .find(|f| f.present)
                .map_or(0, |f| f.class.0 as usize);
            counts[cls] += 1;
        }
        for (i, c) in counts.iter().enumerate() {
            let freq = *c as f64 / 10_000.0;
            assert!((freq - 1.0 / 6.0).abs() < 0.02, "class {i}: {freq}");
        }
    }

    #[test]
    fn class_mix_validation() {
        assert!(ClassMix::new([0.5, 0.5, 0.0, 0.0, 0.0, 0.0]).is_ok());
        assert!(ClassMix::new([1.5, -0.5, 0.0, 0.0, 0.0, 0.0]).is_err());
        assert!(ClassMix::new([0.5, 0.4, 0.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn serialization_round_trips_and_checks_schema() {
        let corpus = generate_corpus(3, &ClassMix::uniform(), 2).unwrap();
        let mut buf = Vec::new();
        write_corpus(&mut buf, &corpus).unwrap();
        assert!(buf.starts_with(CORPUS_SCHEMA.as_bytes()));
        assert_eq!(read_corpus(&buf[..]).unwrap(), corpus);
        let bad = b"other-schema\n".to_vec();
        assert!(read_corpus(&bad[..]).is_err());
    }

    #[test]
    fn three_finding_report_has_three_sentences() {
        let spec = [
            lu_large(1),
            FindingSpec::present(ClassId(2), Location::ALL[1], Extent::Small),
            FindingSpec::present(ClassId(3), Location::ALL[3], Extent::Large),
        ];
        let s = generate_study(1, &spec).unwrap();
        assert_eq!(s.report.len(), 3);
        assert_eq!(s.report[1], "There is small beta in the right upper zone.");
    }

    fn arb_findings() -> impl Strategy<Value = Vec<FindingSpec>> {
        let present = (
            proptest::sample::subsequence(Location::ALL.to_vec(), 1..=4),
            proptest::collection::vec((1u8..=5, any::<bool>()), 4),
        )
            .prop_map(|(locs, attrs)| {
                locs.into_iter()
                    .zip(attrs)
                    .map(|(loc, (c, big))| {
                        let ext = if big { Extent::Large } else { Extent::Small };
                        FindingSpec::present(ClassId(c), loc, ext)
                    })
                    .collect::<Vec<_>>()
            });
        prop_oneof![
            present,
            (1u8..=5).prop_map(|c| vec![FindingSpec::absent(ClassId(c))]),
            Just(Vec::new()),
        ]
    }

    proptest! {
        #[test]
        fn parser_recovers_generating_findings(spec in arb_findings(), s in any::<u64>()) {
            let study = generate_study(s, &spec).unwrap();
            prop_assert_eq!(parse_report(&study.report).unwrap(), spec);
        }

        #[test]
        fn brightest_component_sits_in_its_quadrant(spec in arb_findings(), s in any::<u64>()) {
            let study = generate_study(s, &spec).unwrap();
            let img = &study.image;
            prop_assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
            let comps = components(img);
            prop_assert_eq!(comps.len(), spec.iter().filter(|f| f.present).count());
            for comp in comps {
                let (y, x) = comp[0];
                let loc = Location::of_pixel(y as f64, x as f64, img.height, img.width);
                let intensity = img.get(y, x);
                let owner = spec.iter().find(|f| f.location == Some(loc));
                prop_assert!(owner.is_some());
                let uniform = comp.iter().all(|&(a, b)| {
                    Location::of_pixel(a as f64, b as f64, img.height, img.width) == loc
                        && img.get(a, b) == intensity
                });
                prop_assert!(uniform);
            }
        }
    }
}
