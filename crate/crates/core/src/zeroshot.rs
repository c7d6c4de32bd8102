//! Zero-shot classification, error detection, single-word report
//! correction and gradient-weighted cross-attention maps, all on a frozen
//! model.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use xvl_autograd::graph::softmax_row;
use xvl_autograd::{Graph, ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::errorsim::{self, ErrorType};
use crate::model::{ImageBatch, Modality, Model, TextBatch};
use crate::synthdata::{ClassId, Extent, Image, Location, SyntheticStudy};
use crate::textpipe::{split_sentences, tokenize, words, TokenizedText, Vocabulary};

/// Pairs fused per graph during batched scoring.
const PAIR_CHUNK: usize = 64;

/// Prompts of one class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPrompts {
    pub positive: String,
    pub negative: String,
    pub detailed: Vec<String>,
}

/// Per-class prompts, keyed by class name.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PromptSet {
    pub classes: BTreeMap<String, ClassPrompts>,
}

impl PromptSet {
    /// `"{class}"` / `"no {class}"` plus one description per extent and
    /// location for every abnormal class.
    pub fn synthetic_default() -> Self {
        let mut classes = BTreeMap::new();
        for c in ClassId::abnormal() {
            let n = c.name();
            let mut detailed = Vec::new();
            for e in Extent::ALL {
                for l in Location::ALL {
                    let (side, zone) = l.words();
                    detailed.push(format!("There is {} {n} in the {side} {zone} zone.", e.word()));
                }
            }
            classes.insert(
                n.to_string(),
                ClassPrompts {
                    positive: n.to_string(),
                    negative: format!("no {n}"),
                    detailed,
                },
            );
        }
        Self { classes }
    }

    pub fn get(&self, class: &str) -> Result<&ClassPrompts> {
        self.classes
            .get(class)
            .ok_or_else(|| Error::InvalidArgument(format!("no prompts for class `{class}`")))
    }

    /// Text format: a `[class]` header opens each block, followed by
    /// `positive = …`, `negative = …` and any number of `detail = …` lines.
    /// `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut classes = BTreeMap::new();
        let mut current: Option<(String, Option<String>, Option<String>, Vec<String>)> = None;
        let finish = |cur: Option<(String, Option<String>, Option<String>, Vec<String>)>,
                      classes: &mut BTreeMap<String, ClassPrompts>|
         -> Result<()> {
            if let Some((name, pos, neg, detailed)) = cur {
                let (Some(positive), Some(negative)) = (pos, neg) else {
                    return Err(Error::Format(format!(
                        "class `{name}` needs both a positive and a negative prompt"
                    )));
                };
                if classes
                    .insert(name.clone(), ClassPrompts { positive, negative, detailed })
                    .is_some()
                {
                    return Err(Error::Format(format!("class `{name}` listed twice")));
                }
            }
            Ok(())
        };
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                finish(current.take(), &mut classes)?;
                current = Some((name.trim().to_string(), None, None, Vec::new()));
                continue;
            }
            let Some(cur) = current.as_mut() else {
                return Err(Error::Format(format!("line {}: prompt outside a class block", n + 1)));
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected `key = text`", n + 1)))?;
            let v = v.trim().to_string();
            match k.trim() {
                "positive" => cur.1 = Some(v),
                "negative" => cur.2 = Some(v),
                "detail" => cur.3.push(v),
                other => {
                    return Err(Error::Format(format!("line {}: unknown key `{other}`", n + 1)))
                }
            }
        }
        finish(current, &mut classes)?;
        Ok(Self { classes })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, p) in &self.classes {
            let _ = writeln!(out, "[{name}]");
            let _ = writeln!(out, "positive = {}", p.positive);
            let _ = writeln!(out, "negative = {}", p.negative);
            for d in &p.detailed {
                let _ = writeln!(out, "detail = {d}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    Simple,
    Detailed,
    Error,
}

/// One emitted score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub study_id: String,
    pub class: String,
    pub mode: ScoreMode,
    pub score: f64,
}

/// Two-way softmax probability of the first logit.
pub fn two_way(pos: f64, neg: f64) -> f64 {
    let mut p = [0.0; 2];
    softmax_row(&[pos, neg], None, &mut p);
    p[0]
}

fn sigmoid(x: f64) -> f64 {
    two_way(x, 0.0)
}

/// Top-1 MLM prediction at one masked word.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedPrediction {
    /// Index among the words of the report.
    pub position: usize,
    pub token_id: u32,
    pub predicted_id: u32,
    pub original: String,
    pub predicted: String,
    pub prob: f64,
}

/// A replaced token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Substitution {
    /// Index of the word among the report's non-special tokens.
    pub position: usize,
    pub old: String,
    pub new: String,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    pub report: Vec<String>,
    pub substitutions: Vec<Substitution>,
}

/// Relevance of image regions for one word.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordHeatmap {
    pub position: usize,
    pub token: String,
    /// Patch-grid relevance (`grid × grid`, row-major).
    pub grid: Vec<f64>,
    /// Bilinearly upsampled to image size (row-major).
    pub pixels: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl WordHeatmap {
    /// Share of total relevance in each quadrant, in [`Location::ALL`] order.
    /// All zeros when the map is empty.
    pub fn quadrant_mass(&self) -> [f64; 4] {
        let mut mass = [0.0; 4];
        for r in 0..self.height {
            for c in 0..self.width {
                let loc = Location::of_pixel(r as f64 + 0.5, c as f64 + 0.5, self.height, self.width);
                let q = Location::ALL.iter().position(|l| *l == loc).expect("quadrant");
                mass[q] += self.pixels[r * self.width + c];
            }
        }
        let total: f64 = mass.iter().sum();
        if total > 0.0 {
            mass.iter_mut().for_each(|m| *m /= total);
        }
        mass
    }
}

/// Bilinear resize of a `gh × gw` grid with half-pixel centres.
pub fn bilinear_upsample(grid: &[f64], gh: usize, gw: usize, h: usize, w: usize) -> Vec<f64> {
    let coord = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (y0, y1, fy) = coord(y, h, gh);
        for x in 0..w {
            let (x0, x1, fx) = coord(x, w, gw);
            let top = grid[y0 * gw + x0] * (1.0 - fx) + grid[y0 * gw + x1] * fx;
            let bot = grid[y1 * gw + x0] * (1.0 - fx) + grid[y1 * gw + x1] * fx;
            out[y * w + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Deepest fusion layer whose word-row attention can influence the match
/// logit: after the last layer only the CLS rows reach the ITM head.
pub fn default_gradcam_layer(fusion_layers: usize) -> usize {
    fusion_layers.saturating_sub(2)
}

/// How a pair's match logit is computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreFunction {
    /// ITM head log-odds through the fusion encoder.
    #[default]
    Itm,
    /// Projected [CLS] cosine divided by the learned temperature. Skips
    /// fusion entirely; kept for comparison.
    Cosine,
}

impl std::str::FromStr for ScoreFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "itm" => Ok(Self::Itm),
            "cosine" => Ok(Self::Cosine),
            _ => Err(Error::InvalidArgument(format!("unknown score function `{s}`"))),
        }
    }
}

/// Frozen-model scorer.
pub struct Scorer<'a> {
    pub model: &'a Model,
    pub params: &'a ParamStore,
    pub vocab: &'a Vocabulary,
    pub function: ScoreFunction,
}

impl<'a> Scorer<'a> {
    pub fn new(model: &'a Model, params: &'a ParamStore, vocab: &'a Vocabulary) -> Self {
        Self {
            model,
            params,
            vocab,
            function: ScoreFunction::Itm,
        }
    }

    pub fn with_function(mut self, function: ScoreFunction) -> Self {
        self.function = function;
        self
    }

    pub fn tokenize<S: AsRef<str>>(&self, text: &[S]) -> TokenizedText {
        tokenize(self.vocab, text, self.model.config().max_text_len).trimmed()
    }

    fn encode_images(&self, images: &[&Image]) -> Result<Tensor> {
        let mut g = Graph::frozen();
        let ib = ImageBatch::new(self.model.config(), images)?;
        let x = self.model.encode_image(&mut g, self.params, &ib);
        Ok(g.value(x).clone())
    }

    fn encode_texts(&self, texts: &[&TokenizedText]) -> Result<Vec<(Tensor, TokenizedText)>> {
        // Encode each text at its own length so padding never enters.
        texts
            .iter()
            .map(|t| {
                let mut g = Graph::frozen();
                let tb = TextBatch::new(&[*t]);
                let x = self.model.encode_text(&mut g, self.params, &tb)?;
                Ok((g.value(x).clone(), (*t).clone()))
            })
            .collect()
    }

    /// Match logit for each `(image, text)` index pair: ITM log-odds
    /// `z_match − z_nomatch`, or `cos/τ` under [`ScoreFunction::Cosine`].
    pub fn pair_logits(
        &self,
        images: &[&Image],
        texts: &[&TokenizedText],
        pairs: &[(usize, usize)],
    ) -> Result<Vec<f64>> {
        let image_enc = self.encode_images(images)?;
        let text_enc = self.encode_texts(texts)?;
        let n_img = self.model.config().image_tokens();
        if self.function == ScoreFunction::Cosine {
            return Ok(self.cosine_logits(&image_enc, images.len(), &text_enc, pairs));
        }
        let d = self.model.config().dim;
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(PAIR_CHUNK) {
            let tok: Vec<&TokenizedText> = chunk.iter().map(|&(_, t)| &text_enc[t].1).collect();
            let tb = TextBatch::new(&tok);
            let mut img = Tensor::zeros(chunk.len() * n_img, d);
            let mut txt = Tensor::zeros(chunk.len() * tb.len, d);
            for (k, &(i, t)) in chunk.iter().enumerate() {
                for r in 0..n_img {
                    img.row_mut(k * n_img + r).copy_from_slice(image_enc.row(i * n_img + r));
                }
                let enc = &text_enc[t].0;
                for r in 0..enc.rows() {
                    txt.row_mut(k * tb.len + r).copy_from_slice(enc.row(r));
                }
            }
            let mut g = Graph::frozen();
            let iv = g.constant(img);
            let tv = g.constant(txt);
            let fused = self.model.fuse(&mut g, self.params, iv, tv, &tb, None)?;
            let logits = self.model.itm_logits(&mut g, self.params, &fused);
            let l = g.value(logits);
            out.extend((0..chunk.len()).map(|r| l.get(r, 1) - l.get(r, 0)));
        }
        Ok(out)
    }

    fn cosine_logits(
        &self,
        image_enc: &Tensor,
        n_images: usize,
        text_enc: &[(Tensor, TokenizedText)],
        pairs: &[(usize, usize)],
    ) -> Vec<f64> {
        let n_img = self.model.config().image_tokens();
        let d = self.model.config().dim;
        let mut g = Graph::frozen();
        let mut cls_i = Tensor::zeros(n_images, d);
        for i in 0..n_images {
            cls_i.row_mut(i).copy_from_slice(image_enc.row(i * n_img));
        }
        let mut cls_t = Tensor::zeros(text_enc.len(), d);
        for (t, (enc, _)) in text_enc.iter().enumerate() {
            cls_t.row_mut(t).copy_from_slice(enc.row(0));
        }
        let ci = g.constant(cls_i);
        let ct = g.constant(cls_t);
        let fi = self.model.project(&mut g, self.params, ci, Modality::Image);
        let ft = self.model.project(&mut g, self.params, ct, Modality::Text);
        let tau = self.model.tau(self.params);
        let (fi, ft) = (g.value(fi), g.value(ft));
        pairs
            .iter()
            .map(|&(i, t)| fi.row(i).iter().zip(ft.row(t)).map(|(a, b)| a * b).sum::<f64>() / tau)
            .collect()
    }

    /// Match logit of one pair.
    pub fn match_logit<S: AsRef<str>>(&self, image: &Image, text: &[S]) -> Result<f64> {
        let t = self.tokenize(text);
        Ok(self.pair_logits(&[image], &[&t], &[(0, 0)])?[0])
    }

    /// Probability that the pair matches.
    pub fn match_score<S: AsRef<str>>(&self, image: &Image, text: &[S]) -> Result<f64> {
        Ok(sigmoid(self.match_logit(image, text)?))
    }

    /// `1 − match_score`.
    pub fn detect_error<S: AsRef<str>>(&self, image: &Image, report: &[S]) -> Result<f64> {
        Ok(1.0 - self.match_score(image, report)?)
    }

    pub fn classify_simple(&self, image: &Image, class: &str, prompts: &PromptSet) -> Result<f64> {
        Ok(self.classify_batch(&[image], class, prompts, ScoreMode::Simple)?[0])
    }

    pub fn classify_detailed(&self, image: &Image, class: &str, prompts: &PromptSet) -> Result<f64> {
        Ok(self.classify_batch(&[image], class, prompts, ScoreMode::Detailed)?[0])
    }

    /// Positive-prompt probability for many images. In detailed mode the
    /// positive logit is the mean over the class's descriptions.
    pub fn classify_batch(
        &self,
        images: &[&Image],
        class: &str,
        prompts: &PromptSet,
        mode: ScoreMode,
    ) -> Result<Vec<f64>> {
        let p = prompts.get(class)?;
        let positives: Vec<&String> = match mode {
            ScoreMode::Simple => vec![&p.positive],
            ScoreMode::Detailed => {
                if p.detailed.is_empty() {
                    return Err(Error::InvalidArgument(format!(
                        "class `{class}` has no detailed descriptions"
                    )));
                }
                p.detailed.iter().collect()
            }
            ScoreMode::Error => {
                return Err(Error::InvalidArgument("classification needs simple or detailed mode".into()))
            }
        };
        let mut texts: Vec<TokenizedText> = positives.iter().map(|s| self.tokenize(&[s.as_str()])).collect();
        texts.push(self.tokenize(&[p.negative.as_str()]));
        let refs: Vec<&TokenizedText> = texts.iter().collect();
        let k = positives.len();
        let pairs: Vec<(usize, usize)> = (0..images.len())
            .flat_map(|i| (0..=k).map(move |t| (i, t)))
            .collect();
        let logits = self.pair_logits(images, &refs, &pairs)?;
        Ok(logits
            .chunks(k + 1)
            .map(|row| {
                let pos = row[..k].iter().sum::<f64>() / k as f64;
                two_way(pos, row[k])
            })
            .collect())
    }

    /// Error scores for many `(image, report)` pairs.
    pub fn detect_error_batch(&self, pairs: &[(&Image, &[String])]) -> Result<Vec<f64>> {
        let images: Vec<&Image> = pairs.iter().map(|p| p.0).collect();
        let texts: Vec<TokenizedText> = pairs.iter().map(|p| self.tokenize(p.1)).collect();
        let refs: Vec<&TokenizedText> = texts.iter().collect();
        let idx: Vec<(usize, usize)> = (0..pairs.len()).map(|i| (i, i)).collect();
        Ok(self
            .pair_logits(&images, &refs, &idx)?
            .into_iter()
            .map(|l| 1.0 - sigmoid(l))
            .collect())
    }

    /// For every word, the MLM prediction with only that word masked and the
    /// image attended. Positions index words, not special tokens.
    pub fn masked_predictions<S: AsRef<str>>(&self, image: &Image, report: &[S]) -> Result<Vec<MaskedPrediction>> {
        let tokens = self.tokenize(report);
        let n = tokens.ids.len();
        let positions: Vec<usize> = (0..n).filter(|&i| !self.vocab.is_special(tokens.ids[i])).collect();
        if positions.is_empty() {
            return Ok(Vec::new());
        }
        let rows: Vec<Vec<u32>> = positions
            .iter()
            .map(|&p| {
                let mut r = tokens.ids.clone();
                r[p] = self.vocab.mask_id();
                r
            })
            .collect();
        let tb = TextBatch::from_ids(&rows);
        let mut g = Graph::frozen();
        let imgs: Vec<&Image> = vec![image; rows.len()];
        let ib = ImageBatch::new(self.model.config(), &imgs)?;
        let iv = self.model.encode_image(&mut g, self.params, &ib);
        let tv = self.model.encode_text(&mut g, self.params, &tb)?;
        let fused = self.model.fuse(&mut g, self.params, iv, tv, &tb, None)?;
        let pick: Vec<usize> = positions.iter().enumerate().map(|(k, &p)| k * tb.len + p).collect();
        let sel = g.gather_rows(fused.t2i, &pick);
        let logits = self.model.mlm_logits(&mut g, self.params, sel);
        let logits = g.value(logits);
        let mut probs = vec![0.0; logits.cols()];
        Ok(positions
            .iter()
            .enumerate()
            .map(|(k, &p)| {
                softmax_row(logits.row(k), None, &mut probs);
                let (best, &prob) = probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .expect("non-empty vocabulary");
                MaskedPrediction {
                    position: p - 1,
                    token_id: tokens.ids[p],
                    predicted_id: best as u32,
                    original: self.vocab.token(tokens.ids[p]).to_string(),
                    predicted: self.vocab.token(best as u32).to_string(),
                    prob,
                }
            })
            .collect())
    }

    /// Masks every word of the report independently (each against the
    /// original report) and replaces it when the MLM argmax differs from the
    /// original with probability at least `threshold`.
    pub fn correct_report<S: AsRef<str>>(&self, image: &Image, report: &[S], threshold: f64) -> Result<Correction> {
        let mut ids = self.tokenize(report).ids;
        let mut substitutions = Vec::new();
        for m in self.masked_predictions(image, report)? {
            if m.predicted_id != m.token_id && m.prob >= threshold {
                ids[m.position + 1] = m.predicted_id;
                substitutions.push(Substitution {
                    position: m.position,
                    old: m.original,
                    new: m.predicted,
                    prob: m.prob,
                });
            }
        }
        let text = if substitutions.is_empty() {
            report.iter().map(|s| s.as_ref().to_string()).collect::<Vec<_>>().join(" ")
        } else {
            self.vocab.detokenize(&ids)
        };
        let report = split_sentences(&text).into_iter().map(|s| capitalize(&s)).collect();
        Ok(Correction { report, substitutions })
    }

    /// Gradient-weighted t2i cross-attention of fusion layer `layer` for every
    /// word, with the ITM match log-odds as the target.
    pub fn attention_gradcam<S: AsRef<str>>(&self, image: &Image, text: &[S], layer: usize) -> Result<Vec<WordHeatmap>> {
        self.attention_gradcam_with(image, text, layer, |_| {})
    }

    /// As [`Scorer::attention_gradcam`], letting `hook` edit the attention
    /// gradient before it is combined with the attention.
    pub fn attention_gradcam_with<S: AsRef<str>, F: FnOnce(&mut Tensor)>(
        &self,
        image: &Image,
        text: &[S],
        layer: usize,
        hook: F,
    ) -> Result<Vec<WordHeatmap>> {
        let cfg = self.model.config();
        if layer >= cfg.fusion_layers {
            return Err(Error::InvalidArgument(format!(
                "fusion layer {layer} out of range (model has {})",
                cfg.fusion_layers
            )));
        }
        let tokens = self.tokenize(text);
        let tb = TextBatch::new(&[&tokens]);
        let ib = ImageBatch::new(cfg, &[image])?;
        let mut g = Graph::new();
        let iv = self.model.encode_image(&mut g, self.params, &ib);
        let tv = self.model.encode_text(&mut g, self.params, &tb)?;
        let fused = self.model.fuse(&mut g, self.params, iv, tv, &tb, None)?;
        let logits = self.model.itm_logits(&mut g, self.params, &fused);
        let z1 = g.select_col(logits, 1);
        let z0 = g.select_col(logits, 0);
        let target = g.sub(z1, z0);
        let target = g.sum(target);
        let attn = fused.t2i_attention[layer];
        let mut grads = g.backward(target);
        let a = g.value(attn).clone();
        let mut grad = grads
            .take(attn)
            .unwrap_or_else(|| Tensor::zeros(a.rows(), a.cols()));
        hook(&mut grad);
        let (heads, lq, grid) = (cfg.heads, tb.len, cfg.grid());
        let mut out = Vec::new();
        for i in 0..lq {
            if self.vocab.is_special(tokens.ids[i]) {
                continue;
            }
            let mut cam = vec![0.0; grid * grid];
            for h in 0..heads {
                let r = h * lq + i;
                for (k, c) in cam.iter_mut().enumerate() {
                    let v = a.get(r, k + 1) * grad.get(r, k + 1);
                    *c += v.max(0.0) / heads as f64;
                }
            }
            let pixels = bilinear_upsample(&cam, grid, grid, cfg.image_size, cfg.image_size);
            out.push(WordHeatmap {
                position: i - 1,
                token: self.vocab.token(tokens.ids[i]).to_string(),
                grid: cam,
                pixels,
                height: cfg.image_size,
                width: cfg.image_size,
            });
        }
        Ok(out)
    }
}

/// Error scores for one injected type: every study where the type applies
/// contributes its corrupted pair (label `true`) and every study its clean
/// pair (label `false`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeScores {
    pub error_type: ErrorType,
    pub study_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

/// Injects each error type into every study it applies to, drawing
/// replacement reports from `pool`, and scores all pairs.
pub fn error_detection_by_type<R: Rng + ?Sized>(
    scorer: &Scorer<'_>,
    studies: &[SyntheticStudy],
    pool: &[SyntheticStudy],
    rng: &mut R,
) -> Result<Vec<TypeScores>> {
    let clean: Vec<(&Image, &[String])> = studies.iter().map(|s| (&s.image, s.report.as_slice())).collect();
    let clean_scores = scorer.detect_error_batch(&clean)?;
    let mut out = Vec::new();
    for kind in ErrorType::INJECTED {
        let mut ids = Vec::new();
        let mut reports = Vec::new();
        let mut images = Vec::new();
        for s in studies {
            if let Some(r) = errorsim::inject(kind, s, pool, rng) {
                ids.push(s.study_id.clone());
                images.push(&s.image);
                reports.push(r.corrupted);
            }
        }
        let pairs: Vec<(&Image, &[String])> = images.iter().zip(&reports).map(|(i, r)| (*i, r.as_slice())).collect();
        let mut scores = scorer.detect_error_batch(&pairs)?;
        let mut labels = vec![true; scores.len()];
        ids.extend(studies.iter().map(|s| s.study_id.clone()));
        scores.extend(&clean_scores);
        labels.extend(std::iter::repeat(false).take(clean_scores.len()));
        out.push(TypeScores { error_type: kind, study_ids: ids, scores, labels });
    }
    Ok(out)
}

/// Outcome of one location-flip correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipOutcome {
    pub study_id: String,
    pub position: usize,
    pub original: String,
    pub flipped: String,
    pub restored: bool,
    pub correction: Correction,
}

/// Flips one location term of every abnormal report and checks whether
/// [`Scorer::correct_report`] puts the original word back.
pub fn location_flip_recovery<R: Rng + ?Sized>(
    scorer: &Scorer<'_>,
    studies: &[SyntheticStudy],
    threshold: f64,
    rng: &mut R,
) -> Result<Vec<FlipOutcome>> {
    let mut out = Vec::new();
    for s in studies {
        let Some(flipped) = errorsim::inject_location_error(&s.report, rng) else {
            continue;
        };
        let pos = errorsim::diff_positions(&s.report, &flipped);
        let [position] = pos[..] else {
            return Err(Error::InvalidArgument("location flip must change one word".into()));
        };
        let original = words(&s.report.join(" "))[position].clone();
        let flipped_word = words(&flipped.join(" "))[position].clone();
        let correction = scorer.correct_report(&s.image, &flipped, threshold)?;
        let restored = correction
            .substitutions
            .iter()
            .any(|x| x.position == position && x.new == original);
        out.push(FlipOutcome {
            study_id: s.study_id.clone(),
            position,
            original,
            flipped: flipped_word,
            restored,
            correction,
        });
    }
    Ok(out)
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}
