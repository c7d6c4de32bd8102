//! Vision encoder, text encoder, bidirectional cross-attention fusion,
//! projection heads, ITM head and MLM head.
//!
//! Weights live in a [`ParamStore`] under canonical dotted names; the
//! [`Model`] only records the architecture and the ids of its weights, so the
//! same model runs on the student store and on the momentum teacher's copy.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use xvl_autograd::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::synthdata::Image;
use crate::textpipe::TokenizedText;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vision_layers: usize,
    pub text_layers: usize,
    pub fusion_layers: usize,
    pub proj_dim: usize,
    pub max_text_len: usize,
    pub vocab_size: usize,
    pub tau_init: f64,
    /// Learned absolute positions for patches and tokens. Disabling them
    /// makes the image side permutation-equivariant.
    pub positional: bool,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            dim: 128,
            heads: 4,
            ffn_dim: 512,
            vision_layers: 2,
            text_layers: 2,
            fusion_layers: 2,
            proj_dim: 64,
            max_text_len: crate::textpipe::DEFAULT_MAX_LEN,
            vocab_size,
            tau_init: 0.07,
            positional: true,
            ln_eps: 1e-6,
            init_std: 0.02,
        }
    }

    /// A very small configuration for gradient checks and unit tests.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            image_size: 8,
            patch_size: 4,
            dim: 8,
            heads: 2,
            ffn_dim: 12,
            vision_layers: 1,
            text_layers: 1,
            fusion_layers: 1,
            proj_dim: 6,
            max_text_len: 16,
            vocab_size,
            tau_init: 0.07,
            positional: true,
            ln_eps: 1e-6,
            init_std: 0.2,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patches plus the image [CLS] position.
    pub fn image_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad("image size must be a positive multiple of the patch size");
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad("model width must be divisible by the head count");
        }
        if self.vocab_size < crate::textpipe::SPECIALS.len() {
            return bad("vocabulary smaller than the special token set");
        }
        if self.max_text_len < 2 {
            return bad("max_text_len must be at least 2");
        }
        if !(self.tau_init > 0.0) {
            return bad("tau_init must be positive");
        }
        Ok(())
    }
}

/// Lower and upper clamp for the learnable temperature.
pub const TAU_RANGE: (f64, f64) = (0.01, 0.5);

/// Epsilon inside the L2 normalisation of projected features.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    ln1: Norm,
    attn: Attention,
    ln2: Norm,
    ffn: FeedForward,
}

#[derive(Clone, Copy, Debug)]
struct FusionLayer {
    ln_self: Norm,
    self_attn: Attention,
    ln_cross: Norm,
    cross_attn: Attention,
    ln_ffn: Norm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct Layout {
    patch: Linear,
    image_cls: ParamId,
    image_pos: ParamId,
    vision: Vec<EncoderLayer>,
    vision_ln: Norm,
    token_emb: ParamId,
    text_pos: ParamId,
    text: Vec<EncoderLayer>,
    text_ln: Norm,
    t2i: Vec<FusionLayer>,
    t2i_ln: Norm,
    i2t: Vec<FusionLayer>,
    i2t_ln: Norm,
    proj_image: Linear,
    proj_text: Linear,
    itm: Linear,
    mlm_dense: Linear,
    mlm_ln: Norm,
    mlm_out: Linear,
    tau: ParamId,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
    Value(f64),
}

/// Walks the canonical parameter list, delegating allocation or lookup.
struct Builder<'a> {
    make: &'a mut dyn FnMut(&str, usize, usize, Init) -> Result<ParamId>,
}

impl Builder<'_> {
    fn tensor(&mut self, name: &str, r: usize, c: usize, init: Init) -> Result<ParamId> {
        (self.make)(name, r, c, init)
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.tensor(&format!("{name}.weight"), inp, out, Init::Normal)?,
            b: self.tensor(&format!("{name}.bias"), 1, out, Init::Zeros)?,
        })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            g: self.tensor(&format!("{name}.gamma"), 1, d, Init::Ones)?,
            b: self.tensor(&format!("{name}.beta"), 1, d, Init::Zeros)?,
        })
    }

    fn attention(&mut self, name: &str, d: usize) -> Result<Attention> {
        Ok(Attention {
            q: self.linear(&format!("{name}.query"), d, d)?,
            k: self.linear(&format!("{name}.key"), d, d)?,
            v: self.linear(&format!("{name}.value"), d, d)?,
            o: self.linear(&format!("{name}.output"), d, d)?,
        })
    }

    fn ffn(&mut self, name: &str, d: usize, h: usize) -> Result<FeedForward> {
        Ok(FeedForward {
            up: self.linear(&format!("{name}.up"), d, h)?,
            down: self.linear(&format!("{name}.down"), h, d)?,
        })
    }

    fn encoder_layer(&mut self, name: &str, c: &ModelConfig) -> Result<EncoderLayer> {
        Ok(EncoderLayer {
            ln1: self.norm(&format!("{name}.ln1"), c.dim)?,
            attn: self.attention(&format!("{name}.attn"), c.dim)?,
            ln2: self.norm(&format!("{name}.ln2"), c.dim)?,
            ffn: self.ffn(&format!("{name}.ffn"), c.dim, c.ffn_dim)?,
        })
    }

    fn fusion_layer(&mut self, name: &str, c: &ModelConfig) -> Result<FusionLayer> {
        Ok(FusionLayer {
            ln_self: self.norm(&format!("{name}.ln_self"), c.dim)?,
            self_attn: self.attention(&format!("{name}.self_attn"), c.dim)?,
            ln_cross: self.norm(&format!("{name}.ln_cross"), c.dim)?,
            cross_attn: self.attention(&format!("{name}.cross_attn"), c.dim)?,
            ln_ffn: self.norm(&format!("{name}.ln_ffn"), c.dim)?,
            ffn: self.ffn(&format!("{name}.ffn"), c.dim, c.ffn_dim)?,
        })
    }

    fn layout(&mut self, c: &ModelConfig) -> Result<Layout> {
        let d = c.dim;
        let p2 = c.patch_size * c.patch_size;
        let patch = self.linear("vision.patch", p2, d)?;
        let image_cls = self.tensor("vision.cls", 1, d, Init::Normal)?;
        let image_pos = self.tensor("vision.position", c.image_tokens(), d, Init::Normal)?;
        let vision = (0..c.vision_layers)
            .map(|i| self.encoder_layer(&format!("vision.layer{i}"), c))
            .collect::<Result<_>>()?;
        let vision_ln = self.norm("vision.ln_final", d)?;
        let token_emb = self.tensor("text.token", c.vocab_size, d, Init::Normal)?;
        let text_pos = self.tensor("text.position", c.max_text_len, d, Init::Normal)?;
        let text = (0..c.text_layers)
            .map(|i| self.encoder_layer(&format!("text.layer{i}"), c))
            .collect::<Result<_>>()?;
        let text_ln = self.norm("text.ln_final", d)?;
        let t2i = (0..c.fusion_layers)
            .map(|i| self.fusion_layer(&format!("fusion.t2i.layer{i}"), c))
            .collect::<Result<_>>()?;
        let t2i_ln = self.norm("fusion.t2i.ln_final", d)?;
        let i2t = (0..c.fusion_layers)
            .map(|i| self.fusion_layer(&format!("fusion.i2t.layer{i}"), c))
            .collect::<Result<_>>()?;
        let i2t_ln = self.norm("fusion.i2t.ln_final", d)?;
        Ok(Layout {
            patch,
            image_cls,
            image_pos,
            vision,
            vision_ln,
            token_emb,
            text_pos,
            text,
            text_ln,
            t2i,
            t2i_ln,
            i2t,
            i2t_ln,
            proj_image: self.linear("proj.image", d, c.proj_dim)?,
            proj_text: self.linear("proj.text", d, c.proj_dim)?,
            itm: self.linear("itm", 2 * d, 2)?,
            mlm_dense: self.linear("mlm.dense", d, d)?,
            mlm_ln: self.norm("mlm.ln", d)?,
            mlm_out: self.linear("mlm.decoder", d, c.vocab_size)?,
            tau: self.tensor("tau", 1, 1, Init::Value(c.tau_init))?,
        })
    }
}

/// Images of one batch cut into flattened patches. Row `b·(N+1)` is the
/// all-zero slot of sample `b`'s [CLS] position.
#[derive(Clone, Debug)]
pub struct ImageBatch {
    pub patches: Tensor,
    pub batch: usize,
    pub tokens: usize,
}

impl ImageBatch {
    pub fn new(config: &ModelConfig, images: &[&Image]) -> Result<Self> {
        let (s, p, grid) = (config.image_size, config.patch_size, config.grid());
        let mut patches = Tensor::zeros(images.len() * config.image_tokens(), p * p);
        for (b, img) in images.iter().enumerate() {
            if img.height != s || img.width != s {
                return Err(Error::Shape(format!(
                    "image is {}x{}, model expects {s}x{s}",
                    img.height, img.width
                )));
            }
            for gy in 0..grid {
                for gx in 0..grid {
                    let row = b * config.image_tokens() + 1 + gy * grid + gx;
                    let out = patches.row_mut(row);
                    for dy in 0..p {
                        for dx in 0..p {
                            out[dy * p + dx] = img.get(gy * p + dy, gx * p + dx) as f64;
                        }
                    }
                }
            }
        }
        Ok(Self {
            patches,
            batch: images.len(),
            tokens: config.image_tokens(),
        })
    }

    /// Reorders the patch rows of every sample (position 0 excluded) by
    /// `perm`, where `perm[i]` is the source patch of output patch `i`.
    pub fn permute_patches(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        for b in 0..self.batch {
            for (i, &src) in perm.iter().enumerate() {
                let from = self.patches.row(b * self.tokens + 1 + src).to_vec();
                out.patches.row_mut(b * self.tokens + 1 + i).copy_from_slice(&from);
            }
        }
        out
    }
}

/// Token ids of one batch padded to the longest active sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl TextBatch {
    pub fn new(texts: &[&TokenizedText]) -> Self {
        let len = texts.iter().map(|t| t.active_len()).max().unwrap_or(0).max(1);
        let mut ids = Vec::with_capacity(texts.len() * len);
        let mut mask = Vec::with_capacity(texts.len() * len);
        for t in texts {
            for i in 0..len {
                ids.push(t.ids.get(i).copied().unwrap_or(0) as usize);
                mask.push(t.attention_mask.get(i).copied().unwrap_or(false));
            }
        }
        Self {
            ids,
            mask,
            batch: texts.len(),
            len,
        }
    }

    pub fn from_ids(rows: &[Vec<u32>]) -> Self {
        let len = rows.iter().map(|r| r.len()).max().unwrap_or(0).max(1);
        let mut ids = Vec::with_capacity(rows.len() * len);
        let mut mask = Vec::with_capacity(rows.len() * len);
        for r in rows {
            for i in 0..len {
                ids.push(r.get(i).copied().unwrap_or(0) as usize);
                mask.push(i < r.len());
            }
        }
        Self {
            ids,
            mask,
            batch: rows.len(),
            len,
        }
    }

    /// Samples `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut ids = Vec::with_capacity(idx.len() * self.len);
        let mut mask = Vec::with_capacity(idx.len() * self.len);
        for &i in idx {
            ids.extend_from_slice(&self.ids[i * self.len..(i + 1) * self.len]);
            mask.extend_from_slice(&self.mask[i * self.len..(i + 1) * self.len]);
        }
        Self {
            ids,
            mask,
            batch: idx.len(),
            len: self.len,
        }
    }
}

/// Outputs of the two fusion paths.
#[derive(Clone, Debug)]
pub struct Fused {
    /// Text queries attending to the image: `(batch·text_len) × d`.
    pub t2i: Var,
    /// Image queries attending to the text: `(batch·image_len) × d`.
    pub i2t: Var,
    /// Cross-attention probabilities per fusion layer, each
    /// `(batch·heads·text_len) × image_len`.
    pub t2i_attention: Vec<Var>,
    /// Each `(batch·heads·image_len) × text_len`.
    pub i2t_attention: Vec<Var>,
    pub batch: usize,
    pub text_len: usize,
    pub image_len: usize,
}

/// Architecture plus ids of its weights within a compatible store.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
}

impl Model {
    /// Allocates freshly initialised weights.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let normal = Normal::new(0.0, config.init_std).expect("valid std");
        let layout = {
            let mut make = |name: &str, r: usize, c: usize, init: Init| -> Result<ParamId> {
                let t = match init {
                    Init::Normal => {
                        Tensor::from_vec(r, c, (0..r * c).map(|_| normal.sample(rng)).collect())
                    }
                    Init::Zeros => Tensor::zeros(r, c),
                    Init::Ones => Tensor::filled(r, c, 1.0),
                    Init::Value(v) => Tensor::filled(r, c, v),
                };
                Ok(store.register(name, t))
            };
            Builder { make: &mut make }.layout(&config)?
        };
        Ok((Self { config, layout }, store))
    }

    /// Resolves the architecture against an existing store, checking that
    /// every weight is present with the expected shape and nothing is extra.
    pub fn bind(config: ModelConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let mut seen = 0usize;
        let layout = {
            let mut make = |name: &str, r: usize, c: usize, _: Init| -> Result<ParamId> {
                let id = store
                    .id(name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
                if store.get(id).shape() != (r, c) {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        store.get(id).shape(),
                        (r, c)
                    )));
                }
                seen += 1;
                Ok(id)
            };
            Builder { make: &mut make }.layout(&config)?
        };
        if seen != store.len() {
            return Err(Error::Checkpoint(format!(
                "store holds {} parameters, architecture uses {seen}",
                store.len()
            )));
        }
        Ok(Self { config, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tau_id(&self) -> ParamId {
        self.layout.tau
    }

    pub fn tau(&self, store: &ParamStore) -> f64 {
        store.get(self.layout.tau).item()
    }

    pub fn clamp_tau(&self, store: &mut ParamStore) {
        let t = store.get_mut(self.layout.tau);
        let v = t.item().clamp(TAU_RANGE.0, TAU_RANGE.1);
        t.data_mut()[0] = v;
    }

    pub fn tau_var(&self, g: &mut Graph, store: &ParamStore) -> Var {
        g.param(store, self.layout.tau)
    }

    // ----- building blocks ---------------------------------------------------

    fn linear(&self, g: &mut Graph, s: &ParamStore, l: Linear, x: Var) -> Var {
        let w = g.param(s, l.w);
        let b = g.param(s, l.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    fn norm(&self, g: &mut Graph, s: &ParamStore, n: Norm, x: Var) -> Var {
        let gamma = g.param(s, n.g);
        let beta = g.param(s, n.b);
        g.layer_norm(x, gamma, beta, self.config.ln_eps)
    }

    /// Multi-head attention; returns the output projection and the
    /// probabilities. `key_mask` has one entry per key row.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        a: Attention,
        query: Var,
        keys: Var,
        key_mask: Option<&[bool]>,
        batch: usize,
    ) -> (Var, Var) {
        let h = self.config.heads;
        let q = self.linear(g, s, a.q, query);
        let k = self.linear(g, s, a.k, keys);
        let v = self.linear(g, s, a.v, keys);
        let scores = g.attn_scores(q, k, batch, h);
        let lq = g.value(query).rows() / batch;
        let p = g.masked_softmax(scores, key_mask, h * lq);
        let ctx = g.attn_apply(p, v, batch, h);
        (self.linear(g, s, a.o, ctx), p)
    }

    fn ffn(&self, g: &mut Graph, s: &ParamStore, f: FeedForward, x: Var) -> Var {
        let hid = self.linear(g, s, f.up, x);
        let hid = g.gelu(hid);
        self.linear(g, s, f.down, hid)
    }

    fn encoder_layer(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        l: &EncoderLayer,
        x: Var,
        mask: Option<&[bool]>,
        batch: usize,
    ) -> Var {
        let n = self.norm(g, s, l.ln1, x);
        let (a, _) = self.attention(g, s, l.attn, n, n, mask, batch);
        let x = g.add(x, a);
        let n = self.norm(g, s, l.ln2, x);
        let f = self.ffn(g, s, l.ffn, n);
        g.add(x, f)
    }

    #[allow(clippy::too_many_arguments)]
    fn fusion_layer(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        l: &FusionLayer,
        x: Var,
        self_mask: Option<&[bool]>,
        other: Var,
        other_mask: Option<&[bool]>,
        batch: usize,
    ) -> (Var, Var) {
        let n = self.norm(g, s, l.ln_self, x);
        let (a, _) = self.attention(g, s, l.self_attn, n, n, self_mask, batch);
        let x = g.add(x, a);
        let n = self.norm(g, s, l.ln_cross, x);
        let (c, probs) = self.attention(g, s, l.cross_attn, n, other, other_mask, batch);
        let x = g.add(x, c);
        let n = self.norm(g, s, l.ln_ffn, x);
        let f = self.ffn(g, s, l.ffn, n);
        (g.add(x, f), probs)
    }

    fn positions(&self, g: &mut Graph, s: &ParamStore, table: ParamId, batch: usize, len: usize) -> Var {
        let t = g.param(s, table);
        let idx: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        g.gather_rows(t, &idx)
    }

    // ----- public forward -----------------------------------------------------

    /// Patch embedding sequence `{p_cls, p_1..p_N}` per sample, as a
    /// `(batch·(N+1)) × d` matrix.
    pub fn encode_image(&self, g: &mut Graph, s: &ParamStore, images: &ImageBatch) -> Var {
        let l = &self.layout;
        let (b, n) = (images.batch, images.tokens);
        let x = g.constant(images.patches.clone());
        let mut x = self.linear(g, s, l.patch, x);
        // [CLS] rows receive the learned class vector; patch rows get zeros.
        let cls = g.param(s, l.image_cls);
        let zero = g.constant(Tensor::zeros(1, self.config.dim));
        let table = g.concat_rows(&[zero, cls]);
        let sel: Vec<usize> = (0..b * n).map(|r| usize::from(r % n == 0)).collect();
        let cls_rows = g.gather_rows(table, &sel);
        x = g.add(x, cls_rows);
        if self.config.positional {
            let pos = self.positions(g, s, l.image_pos, b, n);
            x = g.add(x, pos);
        }
        for layer in &l.vision {
            x = self.encoder_layer(g, s, layer, x, None, b);
        }
        self.norm(g, s, l.vision_ln, x)
    }

    /// Word embedding sequence `{w_cls, w_1..w_M}` per sample.
    pub fn encode_text(&self, g: &mut Graph, s: &ParamStore, text: &TextBatch) -> Result<Var> {
        let l = &self.layout;
        if text.len > self.config.max_text_len {
            return Err(Error::Shape(format!(
                "text length {} exceeds {}",
                text.len, self.config.max_text_len
            )));
        }
        if let Some(bad) = text.ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Shape(format!("token id {bad} outside vocabulary")));
        }
        let table = g.param(s, l.token_emb);
        let mut x = g.embedding(table, &text.ids);
        if self.config.positional {
            let pos = self.positions(g, s, l.text_pos, text.batch, text.len);
            x = g.add(x, pos);
        }
        for layer in &l.text {
            x = self.encoder_layer(g, s, layer, x, Some(&text.mask), text.batch);
        }
        Ok(self.norm(g, s, l.text_ln, x))
    }

    /// Runs both fusion paths. `image_key_mask` optionally restricts which
    /// image positions the text may attend to.
    #[allow(clippy::too_many_arguments)]
    pub fn fuse(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        image: Var,
        text: Var,
        text_batch: &TextBatch,
        image_key_mask: Option<&[bool]>,
    ) -> Result<Fused> {
        let l = &self.layout;
        let batch = text_batch.batch;
        let (ir, ic) = g.value(image).shape();
        let (tr, tc) = g.value(text).shape();
        if ic != self.config.dim || tc != self.config.dim {
            return Err(Error::Shape(format!(
                "fusion expects width {}, got image {ic} and text {tc}",
                self.config.dim
            )));
        }
        if batch == 0 || ir % batch != 0 || tr != batch * text_batch.len {
            return Err(Error::Shape("image and text batches disagree".into()));
        }
        let image_len = ir / batch;
        if let Some(m) = image_key_mask {
            if m.len() != ir {
                return Err(Error::Shape("image key mask length mismatch".into()));
            }
        }
        let mut t = text;
        let mut t2i_attention = Vec::with_capacity(l.t2i.len());
        for layer in &l.t2i {
            let (y, p) = self.fusion_layer(
                g,
                s,
                layer,
                t,
                Some(&text_batch.mask),
                image,
                image_key_mask,
                batch,
            );
            t = y;
            t2i_attention.push(p);
        }
        let t = self.norm(g, s, l.t2i_ln, t);
        let mut v = image;
        let mut i2t_attention = Vec::with_capacity(l.i2t.len());
        for layer in &l.i2t {
            let (y, p) = self.fusion_layer(
                g,
                s,
                layer,
                v,
                None,
                text,
                Some(&text_batch.mask),
                batch,
            );
            v = y;
            i2t_attention.push(p);
        }
        let v = self.norm(g, s, l.i2t_ln, v);
        Ok(Fused {
            t2i: t,
            i2t: v,
            t2i_attention,
            i2t_attention,
            batch,
            text_len: text_batch.len,
            image_len,
        })
    }

    /// Rows `b·len` of a sequence matrix, i.e. each sample's [CLS] vector.
    pub fn cls(g: &mut Graph, x: Var, batch: usize) -> Var {
        let len = g.value(x).rows() / batch.max(1);
        let idx: Vec<usize> = (0..batch).map(|b| b * len).collect();
        g.gather_rows(x, &idx)
    }

    /// Whole sequences of the chosen samples, in order.
    pub fn select_samples(g: &mut Graph, x: Var, batch: usize, idx: &[usize]) -> Var {
        let len = g.value(x).rows() / batch.max(1);
        let rows: Vec<usize> = idx.iter().flat_map(|&i| i * len..(i + 1) * len).collect();
        g.gather_rows(x, &rows)
    }

    /// The linear part of a projector, before normalisation.
    pub fn project_linear(&self, g: &mut Graph, s: &ParamStore, cls: Var, which: Modality) -> Var {
        let l = match which {
            Modality::Image => self.layout.proj_image,
            Modality::Text => self.layout.proj_text,
        };
        self.linear(g, s, l, cls)
    }

    /// Unit-norm contrastive feature of a [CLS] vector.
    pub fn project(&self, g: &mut Graph, s: &ParamStore, cls: Var, which: Modality) -> Var {
        let y = self.project_linear(g, s, cls, which);
        g.l2_normalize(y, NORM_EPS)
    }

    /// Two logits per pair: index 1 is "matched".
    pub fn itm_logits(&self, g: &mut Graph, s: &ParamStore, fused: &Fused) -> Var {
        let a = Self::cls(g, fused.t2i, fused.batch);
        let b = Self::cls(g, fused.i2t, fused.batch);
        let x = g.concat_cols(&[a, b]);
        self.linear(g, s, self.layout.itm, x)
    }

    /// Vocabulary logits for the given rows of the text-side fused sequence.
    pub fn mlm_logits(&self, g: &mut Graph, s: &ParamStore, fused_rows: Var) -> Var {
        let l = &self.layout;
        let h = self.linear(g, s, l.mlm_dense, fused_rows);
        let h = g.gelu(h);
        let h = self.norm(g, s, l.mlm_ln, h);
        self.linear(g, s, l.mlm_out, h)
    }
}
