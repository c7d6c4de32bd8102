//! AdamW, global-norm clipping, the learning-rate schedule and the EMA
//! teacher update.

use serde::{Deserialize, Serialize};
use xvl_autograd::{ParamStore, Tensor};

use crate::error::{Error, Result};

/// Linear warmup from `lr_init` to `lr_peak` over steps `0..=warmup`, then
/// cosine decay to 0 at `total`.
pub fn lr_schedule(step: u64, warmup: u64, total: u64, lr_init: f64, lr_peak: f64) -> f64 {
    if step <= warmup {
        if warmup == 0 {
            return lr_peak;
        }
        return lr_init + (lr_peak - lr_init) * step as f64 / warmup as f64;
    }
    if step >= total || total <= warmup {
        return 0.0;
    }
    let frac = (step - warmup) as f64 / (total - warmup) as f64;
    lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// `t ← m·t + (1 − m)·s` for every parameter.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, m: f64) -> Result<()> {
    if !(m > 0.0 && m < 1.0) {
        return Err(Error::InvalidArgument(format!("momentum must lie in (0, 1), got {m}")));
    }
    if !teacher.same_layout(student) {
        return Err(Error::Shape("teacher and student layouts differ".into()));
    }
    for id in student.ids() {
        let s = student.get(id).data();
        for (t, &sv) in teacher.get_mut(id).data_mut().iter_mut().zip(s) {
            *t = m * *t + (1.0 - m) * sv;
        }
    }
    Ok(())
}

/// Scales gradients in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.sq_norm())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }
    norm
}

/// Decoupled-weight-decay Adam. Decay applies to weight matrices only
/// (parameters with more than one row and column).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    #[serde(skip)]
    pub m: Vec<Tensor>,
    #[serde(skip)]
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[k] else { continue };
            let p = store.get_mut(id);
            let decay = if p.rows() > 1 && p.cols() > 1 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let gd = g.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gd[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let mh = md[i] / bc1;
                let vh = vd[i] / bc2;
                *x -= lr * (mh / (vh.sqrt() + self.eps) + decay * *x);
            }
        }
        Ok(())
    }
}
