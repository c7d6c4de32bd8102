//! Training losses, momentum feature queues, similarity-constrained hard
//! negative mining and distillation targets.
//!
//! Loss functions record onto a [`Graph`] so they can be differentiated;
//! teacher quantities enter as plain tensors and never carry gradients.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use xvl_autograd::graph::softmax_row;
use xvl_autograd::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::textpipe::IGNORE_INDEX;

/// Additive logit bias for candidates that must not compete (stale queue
/// copies of the anchor's own study). Large enough that `exp` underflows to 0.
pub const EXCLUDED_LOGIT: f64 = -1e9;

const UNIT_TOL: f64 = 1e-5;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_unit(v: &[f64]) -> Result<()> {
    let n = dot(v, v).sqrt();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::InvalidArgument(format!(
            "expected a unit vector, norm is {n}"
        )));
    }
    Ok(())
}

/// Dot-product similarity of two unit vectors. In checked mode non-unit
/// inputs are rejected.
pub fn similarity(a: &[f64], b: &[f64], checked: bool) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {}", a.len(), b.len())));
    }
    if checked {
        check_unit(a)?;
        check_unit(b)?;
    }
    Ok(dot(a, b))
}

/// Softmax of `anchor · c / τ` over the candidate rows.
pub fn normalized_similarities(anchor: &[f64], candidates: &Tensor, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    if candidates.rows() == 0 {
        return Err(Error::InvalidArgument("empty candidate set".into()));
    }
    if candidates.cols() != anchor.len() {
        return Err(Error::Shape("anchor and candidate widths differ".into()));
    }
    let logits: Vec<f64> = (0..candidates.rows())
        .map(|r| dot(anchor, candidates.row(r)) / tau)
        .collect();
    let mut out = vec![0.0; logits.len()];
    softmax_row(&logits, None, &mut out);
    Ok(out)
}

/// Cross-entropy `H(y, p) = −Σ y log p`.
pub fn cross_entropy(target: &[f64], probs: &[f64]) -> f64 {
    target
        .iter()
        .zip(probs)
        .filter(|(t, _)| **t != 0.0)
        .map(|(t, p)| -t * p.ln())
        .sum()
}

// ----- queues ------------------------------------------------------------------

/// Fixed-capacity FIFO of unit feature vectors from the momentum encoder,
/// each tagged with the index of the study it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureQueue {
    capacity: usize,
    dim: usize,
    data: Vec<f64>,
    tags: Vec<u64>,
    len: usize,
    cursor: usize,
}

impl FeatureQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            data: vec![0.0; capacity * dim],
            tags: vec![0; capacity],
            len: 0,
            cursor: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Slot that the next write goes to.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Appends rows of `features`, evicting the oldest entries once full.
    pub fn enqueue(&mut self, features: &Tensor, tags: &[u64]) -> Result<()> {
        if features.cols() != self.dim || features.rows() != tags.len() {
            return Err(Error::Shape(format!(
                "queue of width {} got {}x{} features with {} tags",
                self.dim,
                features.rows(),
                features.cols(),
                tags.len()
            )));
        }
        for r in 0..features.rows() {
            check_unit(features.row(r))?;
        }
        if self.capacity == 0 {
            return Ok(());
        }
        for r in 0..features.rows() {
            let slot = self.cursor;
            self.data[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(features.row(r));
            self.tags[slot] = tags[r];
            self.cursor = (self.cursor + 1) % self.capacity;
            self.len = (self.len + 1).min(self.capacity);
        }
        Ok(())
    }

    fn order(&self) -> impl Iterator<Item = usize> + '_ {
        let start = if self.len < self.capacity { 0 } else { self.cursor };
        (0..self.len).map(move |i| (start + i) % self.capacity)
    }

    /// Stored vectors, oldest first.
    pub fn contents(&self) -> Tensor {
        let mut out = Tensor::zeros(self.len, self.dim);
        for (i, slot) in self.order().enumerate() {
            out.row_mut(i)
                .copy_from_slice(&self.data[slot * self.dim..(slot + 1) * self.dim]);
        }
        out
    }

    /// Ring buffer slots and their tags, in storage order.
    pub fn raw(&self) -> (&[f64], &[u64]) {
        (&self.data, &self.tags)
    }

    /// Rebuilds a queue from [`FeatureQueue::raw`] plus its counters.
    pub fn from_raw(
        capacity: usize,
        dim: usize,
        data: Vec<f64>,
        tags: Vec<u64>,
        len: usize,
        cursor: usize,
    ) -> Result<Self> {
        if data.len() != capacity * dim
            || tags.len() != capacity
            || len > capacity
            || (capacity > 0 && cursor >= capacity)
            || (len < capacity && cursor != len)
        {
            return Err(Error::Format("inconsistent queue state".into()));
        }
        Ok(Self {
            capacity,
            dim,
            data,
            tags,
            len,
            cursor,
        })
    }

    /// Tags in the same order as [`FeatureQueue::contents`].
    pub fn tags(&self) -> Vec<u64> {
        self.order().map(|s| self.tags[s]).collect()
    }
}

/// Image and text queues advanced in lockstep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueuePair {
    pub image: FeatureQueue,
    pub text: FeatureQueue,
}

impl QueuePair {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            image: FeatureQueue::new(capacity, dim),
            text: FeatureQueue::new(capacity, dim),
        }
    }

    pub fn enqueue(&mut self, image: &Tensor, text: &Tensor, tags: &[u64]) -> Result<()> {
        self.image.enqueue(image, tags)?;
        self.text.enqueue(text, tags)
    }

    pub fn len(&self) -> usize {
        self.image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image.is_empty()
    }
}

// ----- contrastive ---------------------------------------------------------------

/// Contrastive candidate pools: the batch's momentum features followed by the
/// queue. Candidate `i < batch` is the positive of anchor `i`.
#[derive(Clone, Debug)]
pub struct Candidates {
    pub image: Tensor,
    pub text: Tensor,
    /// `batch × len` flags of candidates removed from anchor rows.
    pub exclude: Vec<bool>,
    pub batch: usize,
}

impl Candidates {
    /// Queue entries carrying the same tag as an anchor are excluded from
    /// that anchor's row.
    pub fn new(
        teacher_image: &Tensor,
        teacher_text: &Tensor,
        queues: Option<&QueuePair>,
        tags: &[u64],
    ) -> Result<Self> {
        let b = tags.len();
        if teacher_image.rows() != b || teacher_text.rows() != b {
            return Err(Error::Shape("teacher features and tags disagree".into()));
        }
        let (image, text, qtags) = match queues {
            Some(q) if !q.is_empty() => (
                stack(teacher_image, &q.image.contents()),
                stack(teacher_text, &q.text.contents()),
                q.image.tags(),
            ),
            _ => (teacher_image.clone(), teacher_text.clone(), Vec::new()),
        };
        let len = b + qtags.len();
        if len < 2 {
            return Err(Error::InvalidArgument(
                "contrastive loss needs at least one negative candidate".into(),
            ));
        }
        let mut exclude = vec![false; b * len];
        for (i, tag) in tags.iter().enumerate() {
            for (j, q) in qtags.iter().enumerate() {
                if q == tag {
                    exclude[i * len + b + j] = true;
                }
            }
        }
        Ok(Self {
            image,
            text,
            exclude,
            batch: b,
        })
    }

    pub fn len(&self) -> usize {
        self.image.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.image.rows() == 0
    }

    pub fn excluded(&self, anchor: usize, candidate: usize) -> bool {
        self.exclude[anchor * self.len() + candidate]
    }

    /// Bias rows for anchors `owners[r]`.
    fn bias(&self, owners: &[usize]) -> Tensor {
        let n = self.len();
        let mut t = Tensor::zeros(owners.len(), n);
        for (r, &o) in owners.iter().enumerate() {
            for c in 0..n {
                if self.excluded(o, c) {
                    t.set(r, c, EXCLUDED_LOGIT);
                }
            }
        }
        t
    }
}

fn stack(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::from_vec(a.rows() + b.rows(), a.cols(), data)
}

fn one_hot(rows: &[usize], cols: usize, weight: &[f64]) -> Tensor {
    let mut t = Tensor::zeros(rows.len(), cols);
    for (r, &c) in rows.iter().enumerate() {
        t.set(r, c, weight[r]);
    }
    t
}

/// `(anchors · candidatesᵀ) / τ` plus the exclusion bias of `owners`.
fn logits(g: &mut Graph, anchors: Var, pool: &Tensor, cands: &Candidates, owners: &[usize], tau: Var) -> Var {
    let pool = g.constant(pool.clone());
    let sims = g.matmul_nt(anchors, pool);
    let scaled = g.div_scalar(sims, tau);
    let bias = g.constant(cands.bias(owners));
    g.add(scaled, bias)
}

#[derive(Clone, Debug)]
pub struct ContrastiveOutput {
    pub cmc: Var,
    pub imc: Var,
    /// `cmc + imc`.
    pub total: Var,
    pub i2t_logits: Var,
    pub t2i_logits: Var,
}

/// Cross-modal (i2t, t2i) and intra-modal (i2i, t2t) InfoNCE terms for
/// student features `image`, `text` (both `batch × p`, unit rows).
pub fn contrastive_loss(
    g: &mut Graph,
    image: Var,
    text: Var,
    cands: &Candidates,
    tau: Var,
) -> Result<ContrastiveOutput> {
    let b = cands.batch;
    if g.value(image).rows() != b || g.value(text).rows() != b {
        return Err(Error::Shape("student features and candidates disagree".into()));
    }
    let owners: Vec<usize> = (0..b).collect();
    let y = one_hot(&owners, cands.len(), &vec![1.0; b]);
    let i2t = logits(g, image, &cands.text, cands, &owners, tau);
    let t2i = logits(g, text, &cands.image, cands, &owners, tau);
    let i2i = logits(g, image, &cands.image, cands, &owners, tau);
    let t2t = logits(g, text, &cands.text, cands, &owners, tau);
    let h_i2t = g.soft_cross_entropy(i2t, y.clone());
    let h_t2i = g.soft_cross_entropy(t2i, y.clone());
    let h_i2i = g.soft_cross_entropy(i2i, y.clone());
    let h_t2t = g.soft_cross_entropy(t2t, y);
    let cmc = g.weighted_sum(&[(h_i2t, 0.5), (h_t2i, 0.5)]);
    let imc = g.weighted_sum(&[(h_i2i, 0.5), (h_t2t, 0.5)]);
    let total = g.add(cmc, imc);
    Ok(ContrastiveOutput {
        cmc,
        imc,
        total,
        i2t_logits: i2t,
        t2i_logits: t2i,
    })
}

/// Sentence-to-image contrastive term. Each row of `sentences` is a student
/// sentence feature belonging to sample `owners[r]`; `teacher_sentences`
/// holds the matching momentum features. For the image-to-sentence
/// direction the owner's report candidate is replaced by the teacher
/// sentence feature. Per-sentence losses are averaged within each sample
/// and then across samples.
pub fn sentence_contrastive_loss(
    g: &mut Graph,
    image: Var,
    sentences: Var,
    owners: &[usize],
    teacher_sentences: &Tensor,
    cands: &Candidates,
    tau: Var,
) -> Result<Var> {
    let b = cands.batch;
    let n = cands.len();
    let rows = owners.len();
    if rows == 0 || g.value(sentences).rows() != rows || teacher_sentences.rows() != rows {
        return Err(Error::Shape("sentence features and owners disagree".into()));
    }
    let mut counts = vec![0usize; b];
    for &o in owners {
        if o >= b {
            return Err(Error::Shape(format!("sentence owner {o} outside batch")));
        }
        counts[o] += 1;
    }
    let present = counts.iter().filter(|c| **c > 0).count() as f64;
    // Row weights scaled so the row-mean inside the loss op becomes the
    // per-sample-then-batch mean.
    let weights: Vec<f64> = owners
        .iter()
        .map(|&o| rows as f64 / (counts[o] as f64 * present))
        .collect();
    let y = one_hot(owners, n, &weights);

    let t2i = logits(g, sentences, &cands.image, cands, owners, tau);
    let h_t2i = g.soft_cross_entropy(t2i, y.clone());

    let anchors = g.gather_rows(image, owners);
    let base = logits(g, anchors, &cands.text, cands, owners, tau);
    // Replace column `owner` of each row by anchor · teacher_sentence / τ.
    let keep = {
        let mut t = Tensor::filled(rows, n, 1.0);
        for (r, &o) in owners.iter().enumerate() {
            t.set(r, o, 0.0);
        }
        g.constant(t)
    };
    let base = g.mul(base, keep);
    let ts = g.constant(teacher_sentences.clone());
    let prod = g.mul(anchors, ts);
    let ones = g.constant(Tensor::filled(teacher_sentences.cols(), 1, 1.0));
    let own = g.matmul(prod, ones);
    let own = g.div_scalar(own, tau);
    let spread = g.constant(Tensor::filled(1, n, 1.0));
    let own = g.matmul(own, spread);
    let place = g.constant(one_hot(owners, n, &vec![1.0; rows]));
    let own = g.mul(own, place);
    let i2t = g.add(base, own);
    let h_i2t = g.soft_cross_entropy(i2t, y);
    Ok(g.weighted_sum(&[(h_i2t, 0.5), (h_t2i, 0.5)]))
}

// ----- MLM / ITM -------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct MlmLoss {
    pub loss: Var,
    /// No position was masked; the loss is defined as 0.
    pub empty: bool,
}

/// Mean cross-entropy over rows whose target is not [`IGNORE_INDEX`].
pub fn mlm_loss(g: &mut Graph, logits: Var, targets: &[u32]) -> Result<MlmLoss> {
    let (rows, vocab) = g.value(logits).shape();
    if rows != targets.len() {
        return Err(Error::Shape("one target per logit row expected".into()));
    }
    let picked: Vec<usize> = (0..rows).filter(|&r| targets[r] != IGNORE_INDEX).collect();
    if picked.is_empty() {
        log::warn!("MLM batch without masked positions; loss set to 0");
        return Ok(MlmLoss {
            loss: g.constant(Tensor::scalar(0.0)),
            empty: true,
        });
    }
    let cols: Vec<usize> = picked.iter().map(|&r| targets[r] as usize).collect();
    if let Some(bad) = cols.iter().find(|&&c| c >= vocab) {
        return Err(Error::Shape(format!("target id {bad} outside vocabulary")));
    }
    let sel = g.gather_rows(logits, &picked);
    let y = one_hot(&cols, vocab, &vec![1.0; cols.len()]);
    Ok(MlmLoss {
        loss: g.soft_cross_entropy(sel, y),
        empty: false,
    })
}

/// Two-way cross-entropy of ITM logits; column 1 is "matched".
pub fn itm_loss(g: &mut Graph, logits: Var, matched: &[bool]) -> Result<Var> {
    let (rows, cols) = g.value(logits).shape();
    if cols != 2 || rows != matched.len() {
        return Err(Error::Shape("ITM expects one 2-logit row per label".into()));
    }
    let idx: Vec<usize> = matched.iter().map(|&m| usize::from(m)).collect();
    let y = one_hot(&idx, 2, &vec![1.0; rows]);
    Ok(g.soft_cross_entropy(logits, y))
}

// ----- hard negatives ------------------------------------------------------------

/// One negative selection for an anchor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeDraw {
    pub anchor: usize,
    pub negative: usize,
    /// Cosine between the two samples' text features.
    pub cosine: f64,
    /// No candidate satisfied the constraint; the least similar was taken.
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardNegatives {
    /// For image `i`, the text it is paired with as a negative.
    pub text_for_image: Vec<NegativeDraw>,
    /// For text `i`, the image it is paired with as a negative.
    pub image_for_text: Vec<NegativeDraw>,
}

impl HardNegatives {
    pub fn fallbacks(&self) -> usize {
        self.text_for_image
            .iter()
            .chain(&self.image_for_text)
            .filter(|d| d.fallback)
            .count()
    }

    pub fn all(&self) -> impl Iterator<Item = &NegativeDraw> {
        self.text_for_image.iter().chain(&self.image_for_text)
    }
}

/// Draws one negative per anchor with probability proportional to
/// `exp(s_ij)` over in-batch candidates `j ≠ i` whose text cosine to the
/// anchor's text is below `theta`. `s_i2t` and `s_t2i` are in-batch
/// similarity logits (`batch × batch`); `text_features` are unit rows.
pub fn sample_hard_negatives<R: Rng>(
    s_i2t: &Tensor,
    s_t2i: &Tensor,
    text_features: &Tensor,
    theta: f64,
    rng: &mut R,
) -> Result<HardNegatives> {
    let b = text_features.rows();
    if b < 2 {
        return Err(Error::InvalidArgument("hard negatives need a batch of at least 2".into()));
    }
    if s_i2t.shape() != (b, b) || s_t2i.shape() != (b, b) {
        return Err(Error::Shape("in-batch similarity must be batch × batch".into()));
    }
    let cos = text_features.matmul(&text_features.transpose());
    let mut draw = |s: &Tensor, i: usize| -> NegativeDraw {
        let allowed: Vec<usize> = (0..b).filter(|&j| j != i && cos.get(i, j) < theta).collect();
        if allowed.is_empty() {
            let negative = (0..b)
                .filter(|&j| j != i)
                .min_by(|&x, &y| cos.get(i, x).total_cmp(&cos.get(i, y)))
                .expect("batch has another sample");
            log::debug!("hard-negative fallback for anchor {i}");
            return NegativeDraw {
                anchor: i,
                negative,
                cosine: cos.get(i, negative),
                fallback: true,
            };
        }
        let max = allowed.iter().map(|&j| s.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = allowed.iter().map(|&j| (s.get(i, j) - max).exp()).collect();
        let negative = match WeightedIndex::new(&weights) {
            Ok(w) => allowed[w.sample(rng)],
            Err(_) => allowed[rng.gen_range(0..allowed.len())],
        };
        NegativeDraw {
            anchor: i,
            negative,
            cosine: cos.get(i, negative),
            fallback: false,
        }
    };
    let text_for_image = (0..b).map(|i| draw(s_i2t, i)).collect();
    let image_for_text = (0..b).map(|i| draw(s_t2i, i)).collect();
    Ok(HardNegatives {
        text_for_image,
        image_for_text,
    })
}

// ----- distillation ----------------------------------------------------------------

/// Momentum-teacher pseudo-targets.
#[derive(Clone, Debug)]
pub struct SoftTargets {
    pub i2t: Tensor,
    pub t2i: Tensor,
    /// Rows for the masked positions, in the order the MLM loss uses.
    pub mlm: Tensor,
}

/// Row softmax of `anchors · poolᵀ / τ` with the candidates' exclusions.
pub fn teacher_rows(anchors: &Tensor, pool: &Tensor, cands: &Candidates, tau: f64) -> Tensor {
    let mut logits = anchors.matmul(&pool.transpose());
    logits.scale_assign(1.0 / tau);
    let mut out = Tensor::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let mask: Vec<bool> = (0..logits.cols()).map(|c| !cands.excluded(r, c)).collect();
        softmax_row(logits.row(r), Some(&mask), out.row_mut(r));
    }
    out
}

/// Row softmax of arbitrary logits.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        softmax_row(logits.row(r), None, out.row_mut(r));
    }
    out
}

/// Teacher pseudo-labels from momentum features and teacher MLM logits.
pub fn distillation_targets(
    teacher_image: &Tensor,
    teacher_text: &Tensor,
    cands: &Candidates,
    tau: f64,
    teacher_mlm_logits: &Tensor,
) -> SoftTargets {
    SoftTargets {
        i2t: teacher_rows(teacher_image, &cands.text, cands, tau),
        t2i: teacher_rows(teacher_text, &cands.image, cands, tau),
        mlm: softmax_rows(teacher_mlm_logits),
    }
}

/// Mean of `KL(teacher ‖ student)` over the i2t rows, the t2i rows and the
/// masked MLM rows. An empty MLM part contributes 0.
pub fn distillation_loss(
    g: &mut Graph,
    i2t_logits: Var,
    t2i_logits: Var,
    mlm_logits: Option<Var>,
    targets: &SoftTargets,
) -> Var {
    let a = g.kl_div(i2t_logits, targets.i2t.clone());
    let b = g.kl_div(t2i_logits, targets.t2i.clone());
    let c = match mlm_logits {
        Some(l) if targets.mlm.rows() > 0 => g.kl_div(l, targets.mlm.clone()),
        _ => g.constant(Tensor::scalar(0.0)),
    };
    g.weighted_sum(&[(a, 1.0 / 3.0), (b, 1.0 / 3.0), (c, 1.0 / 3.0)])
}

// ----- totals --------------------------------------------------------------------

/// Scalar values of every logged term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub cmc: f64,
    pub imc: f64,
    pub sent: f64,
    pub mlm: f64,
    pub itm: f64,
    pub dist: f64,
}

impl LossTerms {
    /// `L = L_CMC + L_IMC + L_sent + L_MLM + L_ITM`.
    pub fn base(&self) -> f64 {
        self.cmc + self.imc + self.sent + self.mlm + self.itm
    }
}

/// `(1 − λ)·L + λ·L_dist`.
pub fn total_loss(terms: &LossTerms, lambda: f64) -> f64 {
    (1.0 - lambda) * terms.base() + lambda * terms.dist
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub cmc: Var,
    pub imc: Var,
    pub sent: Var,
    pub mlm: Var,
    pub itm: Var,
    pub dist: Var,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossTerms {
        let v = |x: Var| g.value(x).item();
        LossTerms {
            cmc: v(self.cmc),
            imc: v(self.imc),
            sent: v(self.sent),
            mlm: v(self.mlm),
            itm: v(self.itm),
            dist: v(self.dist),
        }
    }

    /// Records the total on the tape.
    pub fn total(&self, g: &mut Graph, lambda: f64) -> Var {
        let w = 1.0 - lambda;
        g.weighted_sum(&[
            (self.cmc, w),
            (self.imc, w),
            (self.sent, w),
            (self.mlm, w),
            (self.itm, w),
            (self.dist, lambda),
        ])
    }
}
