//! One optimisation step's forward pass: teacher targets, every loss term,
//! and the hard negatives it used.

use rand_chacha::ChaCha8Rng;
use xvl_autograd::{Graph, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::model::{ImageBatch, Modality, Model, TextBatch};
use crate::objectives::{
    contrastive_loss, distillation_loss, distillation_targets, itm_loss, mlm_loss,
    sample_hard_negatives, sentence_contrastive_loss, Candidates, HardNegatives, LossTerms,
    LossVars, QueuePair,
};
use crate::synthdata::{Image, SyntheticStudy};
use crate::textpipe::{mask_tokens, tokenize, MaskedText, MaskingConfig, TokenizedText, Vocabulary, IGNORE_INDEX};

/// A study prepared for training: trimmed token sequences for the whole
/// report and for each sentence.
#[derive(Clone, Debug)]
pub struct Example {
    pub image: Image,
    pub report: TokenizedText,
    pub sentences: Vec<TokenizedText>,
    /// Position of the study in the training corpus.
    pub tag: u64,
}

pub fn prepare(corpus: &[SyntheticStudy], vocab: &Vocabulary, max_len: usize) -> Vec<Example> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let sentences: Vec<TokenizedText> = if s.report.is_empty() {
                vec![tokenize::<&str>(vocab, &[], max_len).trimmed()]
            } else {
                s.report
                    .iter()
                    .map(|r| tokenize(vocab, std::slice::from_ref(r), max_len).trimmed())
                    .collect()
            };
            Example {
                image: s.image.clone(),
                report: tokenize(vocab, &s.report, max_len).trimmed(),
                sentences,
                tag: i as u64,
            }
        })
        .collect()
}

/// Random choices of a step that are made before the forward pass.
#[derive(Clone, Debug)]
pub struct StepPlan {
    pub masked: Vec<MaskedText>,
}

impl StepPlan {
    pub fn draw(
        vocab: &Vocabulary,
        batch: &[&Example],
        masking: &MaskingConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            masked: batch
                .iter()
                .map(|e| mask_tokens(vocab, &e.report, masking, rng))
                .collect(),
        }
    }
}

/// Where ITM negatives come from.
pub enum Negatives<'a> {
    Sample { theta: f64, rng: &'a mut ChaCha8Rng },
    Fixed(&'a HardNegatives),
}

pub struct StepForward {
    pub graph: Graph,
    pub vars: LossVars,
    pub total: Var,
    pub terms: LossTerms,
    pub total_value: f64,
    pub negatives: HardNegatives,
    pub teacher_image: Tensor,
    pub teacher_text: Tensor,
    pub mlm_empty: bool,
    pub tau: f64,
}

struct TeacherOut {
    image: Tensor,
    text: Tensor,
    sentences: Tensor,
    mlm_logits: Tensor,
    tau: f64,
}

fn masked_rows(plan: &StepPlan, len: usize) -> (Vec<usize>, Vec<u32>) {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, m) in plan.masked.iter().enumerate() {
        for (i, &t) in m.targets.iter().enumerate() {
            if t != IGNORE_INDEX {
                rows.push(b * len + i);
                targets.push(t);
            }
        }
    }
    (rows, targets)
}

fn teacher_forward(
    model: &Model,
    teacher: &ParamStore,
    images: &ImageBatch,
    reports: &TextBatch,
    sentences: &TextBatch,
    masked: &TextBatch,
    mlm_rows: &[usize],
) -> Result<TeacherOut> {
    let mut g = Graph::frozen();
    assert!(!g.tracks_gradients(), "teacher graph must not record gradients");
    let b = images.batch;
    let img = model.encode_image(&mut g, teacher, images);
    let icls = Model::cls(&mut g, img, b);
    let ifeat = model.project(&mut g, teacher, icls, Modality::Image);
    let txt = model.encode_text(&mut g, teacher, reports)?;
    let tcls = Model::cls(&mut g, txt, b);
    let tfeat = model.project(&mut g, teacher, tcls, Modality::Text);
    let sent = model.encode_text(&mut g, teacher, sentences)?;
    let scls = Model::cls(&mut g, sent, sentences.batch);
    let sfeat = model.project(&mut g, teacher, scls, Modality::Text);
    let mlm_logits = if mlm_rows.is_empty() {
        Tensor::zeros(0, model.config().vocab_size)
    } else {
        let mt = model.encode_text(&mut g, teacher, masked)?;
        let fused = model.fuse(&mut g, teacher, img, mt, masked, None)?;
        let rows = g.gather_rows(fused.t2i, mlm_rows);
        let l = model.mlm_logits(&mut g, teacher, rows);
        g.value(l).clone()
    };
    Ok(TeacherOut {
        image: g.value(ifeat).clone(),
        text: g.value(tfeat).clone(),
        sentences: g.value(sfeat).clone(),
        mlm_logits,
        tau: model.tau(teacher),
    })
}

/// The first `b` columns (the in-batch candidates) of a logit matrix.
fn in_batch(logits: &Tensor, b: usize) -> Tensor {
    let mut out = Tensor::zeros(logits.rows(), b);
    for r in 0..logits.rows() {
        out.row_mut(r).copy_from_slice(&logits.row(r)[..b]);
    }
    out
}

/// Builds the full loss graph of one step on the student parameters.
#[allow(clippy::too_many_arguments)]
pub fn forward_step(
    model: &Model,
    student: &ParamStore,
    teacher: &ParamStore,
    batch: &[&Example],
    queues: &QueuePair,
    plan: &StepPlan,
    negatives: Negatives<'_>,
    lambda: f64,
) -> Result<StepForward> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::InvalidArgument("a training batch needs at least 2 studies".into()));
    }
    if plan.masked.len() != b {
        return Err(Error::Shape("step plan does not match batch".into()));
    }
    let images: Vec<&Image> = batch.iter().map(|e| &e.image).collect();
    let images = ImageBatch::new(model.config(), &images)?;
    let reports = TextBatch::new(&batch.iter().map(|e| &e.report).collect::<Vec<_>>());
    let mut owners = Vec::new();
    let mut sent_refs = Vec::new();
    for (i, e) in batch.iter().enumerate() {
        for s in &e.sentences {
            owners.push(i);
            sent_refs.push(s);
        }
    }
    let sentences = TextBatch::new(&sent_refs);
    let masked_tokens: Vec<TokenizedText> = plan.masked.iter().map(|m| m.as_tokens()).collect();
    let masked = TextBatch::new(&masked_tokens.iter().collect::<Vec<_>>());
    let (mlm_rows, mlm_targets) = masked_rows(plan, masked.len);
    let tags: Vec<u64> = batch.iter().map(|e| e.tag).collect();

    let t = teacher_forward(model, teacher, &images, &reports, &sentences, &masked, &mlm_rows)?;
    let cands = Candidates::new(&t.image, &t.text, Some(queues), &tags)?;

    let mut g = Graph::new();
    let tau = model.tau_var(&mut g, student);
    let img = model.encode_image(&mut g, student, &images);
    let icls = Model::cls(&mut g, img, b);
    let ifeat = model.project(&mut g, student, icls, Modality::Image);
    let txt = model.encode_text(&mut g, student, &reports)?;
    let tcls = Model::cls(&mut g, txt, b);
    let tfeat = model.project(&mut g, student, tcls, Modality::Text);
    let contrast = contrastive_loss(&mut g, ifeat, tfeat, &cands, tau)?;

    let sent = model.encode_text(&mut g, student, &sentences)?;
    let scls = Model::cls(&mut g, sent, sentences.batch);
    let sfeat = model.project(&mut g, student, scls, Modality::Text);
    let sent_loss =
        sentence_contrastive_loss(&mut g, ifeat, sfeat, &owners, &t.sentences, &cands, tau)?;

    let hard = match negatives {
        Negatives::Fixed(h) => h.clone(),
        Negatives::Sample { theta, rng } => {
            let s_i2t = in_batch(g.value(contrast.i2t_logits), b);
            let s_t2i = in_batch(g.value(contrast.t2i_logits), b);
            sample_hard_negatives(&s_i2t, &s_t2i, g.value(tfeat), theta, rng)?
        }
    };
    if hard.text_for_image.len() != b || hard.image_for_text.len() != b {
        return Err(Error::Shape("negatives do not match batch".into()));
    }

    // ITM over positives, (image, negative text) and (negative image, text).
    let mut img_idx: Vec<usize> = (0..b).collect();
    let mut txt_idx: Vec<usize> = (0..b).collect();
    img_idx.extend(0..b);
    txt_idx.extend(hard.text_for_image.iter().map(|d| d.negative));
    img_idx.extend(hard.image_for_text.iter().map(|d| d.negative));
    txt_idx.extend(0..b);
    let pair_img = Model::select_samples(&mut g, img, b, &img_idx);
    let pair_txt = Model::select_samples(&mut g, txt, b, &txt_idx);
    let pair_batch = reports.select(&txt_idx);
    let fused = model.fuse(&mut g, student, pair_img, pair_txt, &pair_batch, None)?;
    let itm_logits = model.itm_logits(&mut g, student, &fused);
    let labels: Vec<bool> = (0..3 * b).map(|i| i < b).collect();
    let itm = itm_loss(&mut g, itm_logits, &labels)?;

    let (mlm, mlm_student_logits) = if mlm_rows.is_empty() {
        let zero = g.constant(Tensor::zeros(0, model.config().vocab_size));
        (mlm_loss(&mut g, zero, &[])?, None)
    } else {
        let mt = model.encode_text(&mut g, student, &masked)?;
        let fused = model.fuse(&mut g, student, img, mt, &masked, None)?;
        let rows = g.gather_rows(fused.t2i, &mlm_rows);
        let logits = model.mlm_logits(&mut g, student, rows);
        (mlm_loss(&mut g, logits, &mlm_targets)?, Some(logits))
    };

    let soft = distillation_targets(&t.image, &t.text, &cands, t.tau, &t.mlm_logits);
    let dist = distillation_loss(
        &mut g,
        contrast.i2t_logits,
        contrast.t2i_logits,
        mlm_student_logits,
        &soft,
    );

    let vars = LossVars {
        cmc: contrast.cmc,
        imc: contrast.imc,
        sent: sent_loss,
        mlm: mlm.loss,
        itm,
        dist,
    };
    let total = vars.total(&mut g, lambda);
    let terms = vars.values(&g);
    let total_value = g.value(total).item();
    let tau_value = model.tau(student);
    Ok(StepForward {
        graph: g,
        vars,
        total,
        terms,
        total_value,
        negatives: hard,
        teacher_image: t.image,
        teacher_text: t.text,
        mlm_empty: mlm.empty,
        tau: tau_value,
    })
}
