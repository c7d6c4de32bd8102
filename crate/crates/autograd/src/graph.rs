//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of a
//! scalar node with respect to every node that depends on a gradient-requiring
//! leaf, including intermediate nodes such as attention probabilities.

use std::rc::Rc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, MatMut, MatRef, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape bookkeeping for the three multi-head attention primitives.
#[derive(Clone, Copy, Debug)]
struct HeadLayout {
    batch: usize,
    heads: usize,
    lq: usize,
    lk: usize,
    head_dim: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    DivScalar(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SelectCol(Var, usize),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
        eps: f64,
    },
    AttnScores {
        q: Var,
        k: Var,
        layout: HeadLayout,
        scale: f64,
    },
    Softmax(Var),
    AttnApply {
        p: Var,
        v: Var,
        layout: HeadLayout,
    },
    SoftCrossEntropy {
        logits: Var,
        targets: Rc<Tensor>,
        probs: Tensor,
    },
    KlDiv {
        logits: Var,
        targets: Rc<Tensor>,
        probs: Tensor,
    },
    Sum(Var),
    Mean(Var),
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// A recording tape.
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    params_trainable: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A tape whose bound parameters require gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: Vec::new(),
            params_trainable: true,
        }
    }

    /// A tape whose bound parameters are constants; nothing on it can
    /// receive a gradient.
    pub fn frozen() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: Vec::new(),
            params_trainable: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True when any node on the tape participates in differentiation.
    pub fn tracks_gradients(&self) -> bool {
        self.nodes.iter().any(|n| n.requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that requires gradients.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter onto the tape, reusing the same leaf on
    /// repeated calls.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let i = id.index();
        if self.param_vars.len() <= i {
            self.param_vars.resize(i + 1, None);
        }
        if let Some(v) = self.param_vars[i] {
            return v;
        }
        let trainable = self.params_trainable;
        let v = self.push(store.get(id).clone(), Op::Leaf, trainable);
        self.param_vars[i] = Some(v);
        v
    }

    /// Gradients of every bound parameter, indexed by [`ParamId`].
    pub fn param_grads(&self, grads: &mut Gradients, count: usize) -> Vec<Option<Tensor>> {
        (0..count)
            .map(|i| {
                self.param_vars
                    .get(i)
                    .copied()
                    .flatten()
                    .and_then(|v| grads.take(v))
            })
            .collect()
    }

    // ----- arithmetic -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "matmul_nt inner dimension mismatch");
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = Tensor::zeros(m, n);
        gemm(
            m,
            k,
            n,
            1.0,
            MatRef::row_major(av.data(), k),
            MatRef::transposed(bv.data(), k),
            0.0,
            MatMut::row_major(out.data_mut(), n),
        );
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMulNT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "sub shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Adds the `1 × n` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!(bv.rows(), 1, "add_row expects a single row");
        assert_eq!(xv.cols(), bv.cols(), "add_row width mismatch");
        let mut out = xv.clone();
        let bias = bv.data().to_vec();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, b]);
        self.push(out, Op::AddRow(x, b), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale_assign(c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Divides every element of `x` by the scalar node `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let mut out = self.value(x).clone();
        out.scale_assign(1.0 / sv);
        let rg = self.rg(&[x, s]);
        self.push(out, Op::DivScalar(x, s), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu(v)).collect();
        let out = Tensor::from_vec(xv.rows(), xv.cols(), data);
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 × n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (m, n) = xv.shape();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        assert_eq!(g.len(), n, "layer_norm gamma width");
        let mut xhat = Tensor::zeros(m, n);
        let mut out = Tensor::zeros(m, n);
        let mut rstd = Vec::with_capacity(m);
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for (j, v) in row.iter().enumerate() {
                xh[j] = (v - mean) * rs;
            }
            let xh = xhat.row(r).to_vec();
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = xh[j] * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Looks up rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let out = self.value(table).select_rows(ids);
        let rg = self.rg(&[table]);
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Copies rows of `x` (duplicates allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let out = self.value(x).select_rows(idx);
        let rg = self.rg(&[x]);
        self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols height mismatch");
            let w = v.cols();
            for r in 0..rows {
                out.row_mut(r)[off..off + w].copy_from_slice(v.row(r));
            }
            off += w;
        }
        let rg = self.rg(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Column `c` of `x` as an `m × 1` tensor.
    pub fn select_col(&mut self, x: Var, c: usize) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows()).map(|r| xv.get(r, c)).collect();
        let out = Tensor::from_vec(xv.rows(), 1, data);
        let rg = self.rg(&[x]);
        self.push(out, Op::SelectCol(x, c), rg)
    }

    /// Scales each row to unit L2 norm: `x / max(‖x‖, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            let d = n.max(eps);
            for o in out.row_mut(r) {
                *o /= d;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::L2Normalize { x, norms, eps }, rg)
    }

    // ----- attention ----------------------------------------------------------

    /// Scaled per-head dot products. `q` is `(batch·lq) × d`, `k` is
    /// `(batch·lk) × d`; the result is `(batch·heads·lq) × lk` with row
    /// `((b·heads + h)·lq + i)`.
    pub fn attn_scores(&mut self, q: Var, k: Var, batch: usize, heads: usize) -> Var {
        let (qv, kv) = (self.value(q), self.value(k));
        let d = qv.cols();
        assert_eq!(kv.cols(), d, "attention width mismatch");
        assert_eq!(d % heads, 0, "width not divisible by head count");
        assert_eq!(qv.rows() % batch, 0);
        assert_eq!(kv.rows() % batch, 0);
        let layout = HeadLayout {
            batch,
            heads,
            lq: qv.rows() / batch,
            lk: kv.rows() / batch,
            head_dim: d / heads,
        };
        let scale = 1.0 / (layout.head_dim as f64).sqrt();
        let HeadLayout { lq, lk, head_dim, .. } = layout;
        let mut out = Tensor::zeros(batch * heads * lq, lk);
        for b in 0..batch {
            for h in 0..heads {
                gemm(
                    lq,
                    head_dim,
                    lk,
                    scale,
                    MatRef::row_major(qv.data(), d).at(b * lq * d + h * head_dim),
                    MatRef::transposed(kv.data(), d).at(b * lk * d + h * head_dim),
                    0.0,
                    MatMut::row_major(out.data_mut(), lk).at((b * heads + h) * lq * lk),
                );
            }
        }
        let rg = self.rg(&[q, k]);
        self.push(
            out,
            Op::AttnScores {
                q,
                k,
                layout,
                scale,
            },
            rg,
        )
    }

    /// Row softmax. When `key_mask` is given (length `groups × cols`), row
    /// `r` uses mask row `r / rows_per_group`; masked entries get exactly
    /// zero probability and a fully masked row yields all zeros.
    pub fn masked_softmax(
        &mut self,
        x: Var,
        key_mask: Option<&[bool]>,
        rows_per_group: usize,
    ) -> Var {
        let xv = self.value(x);
        let (m, n) = xv.shape();
        let mut out = Tensor::zeros(m, n);
        for r in 0..m {
            let mask = key_mask.map(|km| {
                let g = r / rows_per_group;
                &km[g * n..(g + 1) * n]
            });
            softmax_row(xv.row(r), mask, out.row_mut(r));
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let rows = self.value(x).rows().max(1);
        self.masked_softmax(x, None, rows)
    }

    /// Weighted sum of values: inverse of the layout produced by
    /// [`Graph::attn_scores`]; returns `(batch·lq) × d`.
    pub fn attn_apply(&mut self, p: Var, v: Var, batch: usize, heads: usize) -> Var {
        let (pv, vv) = (self.value(p), self.value(v));
        let d = vv.cols();
        let lk = pv.cols();
        assert_eq!(vv.rows(), batch * lk, "attn_apply value length mismatch");
        assert_eq!(pv.rows() % (batch * heads), 0);
        let layout = HeadLayout {
            batch,
            heads,
            lq: pv.rows() / (batch * heads),
            lk,
            head_dim: d / heads,
        };
        let HeadLayout { lq, head_dim, .. } = layout;
        let mut out = Tensor::zeros(batch * lq, d);
        for b in 0..batch {
            for h in 0..heads {
                gemm(
                    lq,
                    lk,
                    head_dim,
                    1.0,
                    MatRef::row_major(pv.data(), lk).at((b * heads + h) * lq * lk),
                    MatRef::row_major(vv.data(), d).at(b * lk * d + h * head_dim),
                    0.0,
                    MatMut::row_major(out.data_mut(), d).at(b * lq * d + h * head_dim),
                );
            }
        }
        let rg = self.rg(&[p, v]);
        self.push(out, Op::AttnApply { p, v, layout }, rg)
    }

    // ----- losses & reductions ----------------------------------------------

    /// Mean over rows of `-Σ_j t_j log softmax(logits)_j` for constant
    /// target rows `t`.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Tensor) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), targets.shape(), "targets shape mismatch");
        let (m, n) = lv.shape();
        let mut probs = Tensor::zeros(m, n);
        let mut total = 0.0;
        for r in 0..m {
            let row = lv.row(r);
            let lse = log_sum_exp(row);
            for (j, &l) in row.iter().enumerate() {
                let t = targets.get(r, j);
                if t != 0.0 {
                    total -= t * (l - lse);
                }
                probs.set(r, j, (l - lse).exp());
            }
        }
        let out = Tensor::scalar(if m == 0 { 0.0 } else { total / m as f64 });
        let rg = self.rg(&[logits]);
        self.push(
            out,
            Op::SoftCrossEntropy {
                logits,
                targets: Rc::new(targets),
                probs,
            },
            rg,
        )
    }

    /// Mean over rows of `KL(t ‖ softmax(logits))` for constant target rows.
    pub fn kl_div(&mut self, logits: Var, targets: Tensor) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), targets.shape(), "targets shape mismatch");
        let (m, n) = lv.shape();
        let mut probs = Tensor::zeros(m, n);
        let mut total = 0.0;
        for r in 0..m {
            let row = lv.row(r);
            let lse = log_sum_exp(row);
            for (j, &l) in row.iter().enumerate() {
                let t = targets.get(r, j);
                if t > 0.0 {
                    total += t * (t.ln() - (l - lse));
                }
                probs.set(r, j, (l - lse).exp());
            }
        }
        let out = Tensor::scalar(if m == 0 { 0.0 } else { total / m as f64 });
        let rg = self.rg(&[logits]);
        self.push(
            out,
            Op::KlDiv {
                logits,
                targets: Rc::new(targets),
                probs,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.sum() / xv.len().max(1) as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// `Σ w_i · x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut s = 0.0;
        for &(v, w) in terms {
            s += w * self.value(v).item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), rg)
    }

    // ----- backward -----------------------------------------------------------

    /// Gradients of the scalar `target` with respect to every node.
    pub fn backward(&self, target: Var) -> Gradients {
        let tv = self.value(target);
        assert_eq!(tv.len(), 1, "backward target must be a scalar");
        self.backward_with_seed(target, Tensor::scalar(1.0))
    }

    /// Backward pass seeded with an explicit upstream gradient.
    pub fn backward_with_seed(&self, target: Var, seed: Tensor) -> Gradients {
        assert_eq!(self.value(target).shape(), seed.shape(), "seed shape");
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(target.0 + 1, || None);
        if !self.nodes[target.0].requires_grad {
            return Gradients { grads };
        }
        grads[target.0] = Some(seed);
        for i in (0..=target.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backprop_node(node, &gy, &mut grads);
            }
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let mut ga = Tensor::zeros(m, k);
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        MatRef::row_major(gy.data(), n),
                        MatRef::transposed(bv.data(), n),
                        0.0,
                        MatMut::row_major(ga.data_mut(), k),
                    );
                    self.acc(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = Tensor::zeros(k, n);
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        MatRef::transposed(av.data(), k),
                        MatRef::row_major(gy.data(), n),
                        0.0,
                        MatMut::row_major(gb.data_mut(), n),
                    );
                    self.acc(grads, *b, gb);
                }
            }
            Op::MatMulNT(a, b) => {
                // y = a bᵀ ; da = gy b ; db = gyᵀ a
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if self.wants(*a) {
                    let mut ga = Tensor::zeros(m, k);
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        MatRef::row_major(gy.data(), n),
                        MatRef::row_major(bv.data(), k),
                        0.0,
                        MatMut::row_major(ga.data_mut(), k),
                    );
                    self.acc(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = Tensor::zeros(n, k);
                    gemm(
                        n,
                        m,
                        k,
                        1.0,
                        MatRef::transposed(gy.data(), n),
                        MatRef::row_major(av.data(), k),
                        0.0,
                        MatMut::row_major(gb.data_mut(), k),
                    );
                    self.acc(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gy.clone());
                if self.wants(*b) {
                    let mut g = gy.clone();
                    g.scale_assign(-1.0);
                    self.acc(grads, *b, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = gy.data().iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                    self.acc(grads, *a, Tensor::from_vec(gy.rows(), gy.cols(), d));
                }
                if self.wants(*b) {
                    let d = gy.data().iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    self.acc(grads, *b, Tensor::from_vec(gy.rows(), gy.cols(), d));
                }
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, gy.clone());
                if self.wants(*b) {
                    let mut gb = Tensor::zeros(1, gy.cols());
                    for r in 0..gy.rows() {
                        for (o, g) in gb.data_mut().iter_mut().zip(gy.row(r)) {
                            *o += g;
                        }
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::Scale(x, c) => {
                let mut g = gy.clone();
                g.scale_assign(*c);
                self.acc(grads, *x, g);
            }
            Op::DivScalar(x, s) => {
                let sv = self.value(*s).item();
                if self.wants(*x) {
                    let mut g = gy.clone();
                    g.scale_assign(1.0 / sv);
                    self.acc(grads, *x, g);
                }
                if self.wants(*s) {
                    // d(x/s)/ds = -x/s² = -y/s
                    let y = &node.value;
                    let dot: f64 = gy.data().iter().zip(y.data()).map(|(g, v)| g * v).sum();
                    self.acc(grads, *s, Tensor::scalar(-dot / sv));
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = gy
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(g, &v)| g * gelu_grad(v))
                    .collect();
                self.acc(grads, *x, Tensor::from_vec(gy.rows(), gy.cols(), d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = gy.shape();
                let g = self.value(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut gg = Tensor::zeros(1, n);
                    let mut gb = Tensor::zeros(1, n);
                    for r in 0..m {
                        let (gyr, xh) = (gy.row(r), xhat.row(r));
                        for j in 0..n {
                            gg.data_mut()[j] += gyr[j] * xh[j];
                            gb.data_mut()[j] += gyr[j];
                        }
                    }
                    self.acc(grads, *gamma, gg);
                    self.acc(grads, *beta, gb);
                }
                if self.wants(*x) {
                    let mut gx = Tensor::zeros(m, n);
                    let nf = n as f64;
                    for r in 0..m {
                        let (gyr, xh) = (gy.row(r), xhat.row(r));
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let dxh = gyr[j] * g[j];
                            s1 += dxh;
                            s2 += dxh * xh[j];
                        }
                        let rs = rstd[r];
                        let out = gx.row_mut(r);
                        for j in 0..n {
                            let dxh = gyr[j] * g[j];
                            out[j] = rs * (dxh - s1 / nf - xh[j] * s2 / nf);
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let tv = self.value(*table);
                    let mut gt = Tensor::zeros(tv.rows(), tv.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, g) in gt.row_mut(id).iter_mut().zip(gy.row(r)) {
                            *o += g;
                        }
                    }
                    self.acc(grads, *table, gt);
                }
            }
            Op::GatherRows { x, idx } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, g) in gx.row_mut(i).iter_mut().zip(gy.row(r)) {
                            *o += g;
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::ConcatRows(parts) => {
                let cols = gy.cols();
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.wants(p) {
                        let d = gy.data()[off * cols..(off + rows) * cols].to_vec();
                        self.acc(grads, p, Tensor::from_vec(rows, cols, d));
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let mut g = Tensor::zeros(gy.rows(), w);
                        for r in 0..gy.rows() {
                            g.row_mut(r).copy_from_slice(&gy.row(r)[off..off + w]);
                        }
                        self.acc(grads, p, g);
                    }
                    off += w;
                }
            }
            Op::SelectCol(x, c) => {
                let xv = self.value(*x);
                let mut g = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    g.set(r, *c, gy.get(r, 0));
                }
                self.acc(grads, *x, g);
            }
            Op::L2Normalize { x, norms, eps } => {
                let y = &node.value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), gy.row(r));
                    let out = gx.row_mut(r);
                    if norms[r] > *eps {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..yr.len() {
                            out[j] = (gr[j] - yr[j] * dot) / norms[r];
                        }
                    } else {
                        for j in 0..yr.len() {
                            out[j] = gr[j] / eps;
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::AttnScores {
                q,
                k,
                layout,
                scale,
            } => {
                let (qv, kv) = (self.value(*q), self.value(*k));
                let HeadLayout {
                    batch,
                    heads,
                    lq,
                    lk,
                    head_dim,
                } = *layout;
                let d = qv.cols();
                if self.wants(*q) {
                    let mut gq = Tensor::zeros(qv.rows(), d);
                    for b in 0..batch {
                        for h in 0..heads {
                            // dQ_h = dS_h · K_h · scale
                            gemm(
                                lq,
                                lk,
                                head_dim,
                                *scale,
                                MatRef::row_major(gy.data(), lk).at((b * heads + h) * lq * lk),
                                MatRef::row_major(kv.data(), d).at(b * lk * d + h * head_dim),
                                0.0,
                                MatMut::row_major(gq.data_mut(), d).at(b * lq * d + h * head_dim),
                            );
                        }
                    }
                    self.acc(grads, *q, gq);
                }
                if self.wants(*k) {
                    let mut gk = Tensor::zeros(kv.rows(), d);
                    for b in 0..batch {
                        for h in 0..heads {
                            // dK_h = dS_hᵀ · Q_h · scale
                            gemm(
                                lk,
                                lq,
                                head_dim,
                                *scale,
                                MatRef::transposed(gy.data(), lk).at((b * heads + h) * lq * lk),
                                MatRef::row_major(qv.data(), d).at(b * lq * d + h * head_dim),
                                0.0,
                                MatMut::row_major(gk.data_mut(), d).at(b * lk * d + h * head_dim),
                            );
                        }
                    }
                    self.acc(grads, *k, gk);
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), gy.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::AttnApply { p, v, layout } => {
                let (pv, vv) = (self.value(*p), self.value(*v));
                let HeadLayout {
                    batch,
                    heads,
                    lq,
                    lk,
                    head_dim,
                } = *layout;
                let d = vv.cols();
                if self.wants(*p) {
                    let mut gp = Tensor::zeros(pv.rows(), lk);
                    for b in 0..batch {
                        for h in 0..heads {
                            // dP_h = dO_h · V_hᵀ
                            gemm(
                                lq,
                                head_dim,
                                lk,
                                1.0,
                                MatRef::row_major(gy.data(), d).at(b * lq * d + h * head_dim),
                                MatRef::transposed(vv.data(), d).at(b * lk * d + h * head_dim),
                                0.0,
                                MatMut::row_major(gp.data_mut(), lk).at((b * heads + h) * lq * lk),
                            );
                        }
                    }
                    self.acc(grads, *p, gp);
                }
                if self.wants(*v) {
                    let mut gv = Tensor::zeros(vv.rows(), d);
                    for b in 0..batch {
                        for h in 0..heads {
                            // dV_h = P_hᵀ · dO_h
                            gemm(
                                lk,
                                lq,
                                head_dim,
                                1.0,
                                MatRef::transposed(pv.data(), lk).at((b * heads + h) * lq * lk),
                                MatRef::row_major(gy.data(), d).at(b * lq * d + h * head_dim),
                                0.0,
                                MatMut::row_major(gv.data_mut(), d).at(b * lk * d + h * head_dim),
                            );
                        }
                    }
                    self.acc(grads, *v, gv);
                }
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (m, n) = probs.shape();
                let s = gy.item() / m.max(1) as f64;
                let mut g = Tensor::zeros(m, n);
                for r in 0..m {
                    let tsum: f64 = targets.row(r).iter().sum();
                    for j in 0..n {
                        g.set(r, j, s * (probs.get(r, j) * tsum - targets.get(r, j)));
                    }
                }
                self.acc(grads, *logits, g);
            }
            Op::KlDiv {
                logits,
                targets,
                probs,
            } => {
                let (m, n) = probs.shape();
                let s = gy.item() / m.max(1) as f64;
                let mut g = Tensor::zeros(m, n);
                for r in 0..m {
                    let tsum: f64 = targets.row(r).iter().sum();
                    for j in 0..n {
                        g.set(r, j, s * (probs.get(r, j) * tsum - targets.get(r, j)));
                    }
                }
                self.acc(grads, *logits, g);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                self.acc(grads, *x, Tensor::filled(xv.rows(), xv.cols(), gy.item()));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let c = gy.item() / xv.len().max(1) as f64;
                self.acc(grads, *x, Tensor::filled(xv.rows(), xv.cols(), c));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.acc(grads, v, Tensor::scalar(gy.item() * w));
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax of one row into `out`.
pub fn softmax_row(row: &[f64], mask: Option<&[bool]>, out: &mut [f64]) {
    let keep = |j: usize| mask.map_or(true, |m| m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if keep(j) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut z = 0.0;
    for (j, &v) in row.iter().enumerate() {
        let e = if keep(j) { (v - max).exp() } else { 0.0 };
        out[j] = e;
        z += e;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}
