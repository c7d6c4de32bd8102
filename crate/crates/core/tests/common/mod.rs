//! Scalar-loop reference implementations shared by the integration tests.
//! Nothing here calls into the library's loss code.

#![allow(dead_code)]

pub type Rows = Vec<Vec<f64>>;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter().map(|x| x / n).collect()
}

/// `log Σ exp(x_j)` over the kept entries.
fn log_sum_exp(xs: &[f64], keep: &[bool]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for (x, k) in xs.iter().zip(keep) {
        if *k && *x > m {
            m = *x;
        }
    }
    let mut s = 0.0;
    for (x, k) in xs.iter().zip(keep) {
        if *k {
            s += (x - m).exp();
        }
    }
    m + s.ln()
}

/// `−log softmax(x)[target]` over the kept entries.
pub fn nll(xs: &[f64], keep: &[bool], target: usize) -> f64 {
    log_sum_exp(xs, keep) - xs[target]
}

pub fn softmax(xs: &[f64], keep: &[bool]) -> Vec<f64> {
    let l = log_sum_exp(xs, keep);
    xs.iter()
        .zip(keep)
        .map(|(x, k)| if *k { (x - l).exp() } else { 0.0 })
        .collect()
}

/// `KL(t ‖ softmax(x))` summed over entries with `t > 0`.
pub fn kl(target: &[f64], xs: &[f64], keep: &[bool]) -> f64 {
    let l = log_sum_exp(xs, keep);
    let mut s = 0.0;
    for j in 0..xs.len() {
        if target[j] > 0.0 {
            s += target[j] * (target[j].ln() - (xs[j] - l));
        }
    }
    s
}

/// Candidate pools: teacher batch rows then queue rows (oldest first), and
/// the per-anchor keep mask removing queue rows with the anchor's tag.
pub struct Pools {
    pub image: Rows,
    pub text: Rows,
    pub keep: Vec<Vec<bool>>,
}

pub fn pools(t_img: &Rows, t_txt: &Rows, q_img: &Rows, q_txt: &Rows, q_tags: &[u64], tags: &[u64]) -> Pools {
    let mut image = t_img.clone();
    image.extend(q_img.iter().cloned());
    let mut text = t_txt.clone();
    text.extend(q_txt.iter().cloned());
    let keep = tags
        .iter()
        .map(|t| {
            let mut k = vec![true; t_img.len()];
            k.extend(q_tags.iter().map(|q| q != t));
            k
        })
        .collect();
    Pools { image, text, keep }
}

fn row_logits(anchor: &[f64], pool: &Rows, tau: f64) -> Vec<f64> {
    pool.iter().map(|c| dot(anchor, c) / tau).collect()
}

/// `(cmc, imc)`.
pub fn contrastive(s_img: &Rows, s_txt: &Rows, p: &Pools, tau: f64) -> (f64, f64) {
    let b = s_img.len();
    let (mut i2t, mut t2i, mut i2i, mut t2t) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..b {
        i2t += nll(&row_logits(&s_img[i], &p.text, tau), &p.keep[i], i);
        t2i += nll(&row_logits(&s_txt[i], &p.image, tau), &p.keep[i], i);
        i2i += nll(&row_logits(&s_img[i], &p.image, tau), &p.keep[i], i);
        t2t += nll(&row_logits(&s_txt[i], &p.text, tau), &p.keep[i], i);
    }
    let n = b as f64;
    (0.5 * (i2t / n + t2i / n), 0.5 * (i2i / n + t2t / n))
}

/// Sentence-level term: per sentence `½(i2t + t2i)`, averaged within each
/// sample and then across samples that own sentences.
pub fn sentence(s_img: &Rows, s_sent: &Rows, owners: &[usize], t_sent: &Rows, p: &Pools, tau: f64) -> f64 {
    let b = s_img.len();
    let mut per = vec![Vec::new(); b];
    for r in 0..owners.len() {
        let o = owners[r];
        let t2i = nll(&row_logits(&s_sent[r], &p.image, tau), &p.keep[o], o);
        let mut pool = p.text.clone();
        pool[o] = t_sent[r].clone();
        let i2t = nll(&row_logits(&s_img[o], &pool, tau), &p.keep[o], o);
        per[o].push(0.5 * (i2t + t2i));
    }
    let mut total = 0.0;
    let mut count = 0.0;
    for v in per.iter().filter(|v| !v.is_empty()) {
        total += v.iter().sum::<f64>() / v.len() as f64;
        count += 1.0;
    }
    total / count
}

/// Mean cross-entropy of the rows with a target.
pub fn mean_ce(logits: &Rows, targets: &[Option<usize>]) -> f64 {
    let mut s = 0.0;
    let mut n = 0.0;
    for (row, t) in logits.iter().zip(targets) {
        if let Some(t) = t {
            s += nll(row, &vec![true; row.len()], *t);
            n += 1.0;
        }
    }
    if n == 0.0 {
        0.0
    } else {
        s / n
    }
}

/// Teacher pseudo-label rows with exclusions.
pub fn teacher_targets(anchors: &Rows, pool: &Rows, keep: &[Vec<bool>], tau: f64) -> Rows {
    anchors
        .iter()
        .enumerate()
        .map(|(i, a)| softmax(&row_logits(a, pool, tau), &keep[i]))
        .collect()
}

/// Mean over rows of `KL(target ‖ softmax(student))`.
pub fn mean_kl(targets: &Rows, student: &Rows, keep: &[Vec<bool>]) -> f64 {
    let mut s = 0.0;
    for i in 0..targets.len() {
        s += kl(&targets[i], &student[i], &keep[i]);
    }
    if targets.is_empty() {
        0.0
    } else {
        s / targets.len() as f64
    }
}

/// Distillation term from student features and teacher targets.
#[allow(clippy::too_many_arguments)]
pub fn distillation(
    s_img: &Rows,
    s_txt: &Rows,
    t_img: &Rows,
    t_txt: &Rows,
    p: &Pools,
    tau_student: f64,
    tau_teacher: f64,
    student_mlm: &Rows,
    teacher_mlm: &Rows,
) -> f64 {
    let ti2t = teacher_targets(t_img, &p.text, &p.keep, tau_teacher);
    let tt2i = teacher_targets(t_txt, &p.image, &p.keep, tau_teacher);
    let si2t: Rows = s_img.iter().map(|a| row_logits(a, &p.text, tau_student)).collect();
    let st2i: Rows = s_txt.iter().map(|a| row_logits(a, &p.image, tau_student)).collect();
    let all = |n: usize, w: usize| vec![vec![true; w]; n];
    let tm: Rows = teacher_mlm.iter().map(|r| softmax(r, &vec![true; r.len()])).collect();
    let mlm = if student_mlm.is_empty() {
        0.0
    } else {
        mean_kl(&tm, student_mlm, &all(student_mlm.len(), student_mlm[0].len()))
    };
    (mean_kl(&ti2t, &si2t, &p.keep) + mean_kl(&tt2i, &st2i, &p.keep) + mlm) / 3.0
}

/// `(1 − λ)·(sum of base terms) + λ·dist`.
pub fn total(base: &[f64], dist: f64, lambda: f64) -> f64 {
    (1.0 - lambda) * base.iter().sum::<f64>() + lambda * dist
}

/// FIFO reference for the feature queue.
pub struct RingOracle {
    pub capacity: usize,
    pub rows: std::collections::VecDeque<(Vec<f64>, u64)>,
}

impl RingOracle {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            rows: Default::default(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>, tag: u64) {
        if self.capacity == 0 {
            return;
        }
        if self.rows.len() == self.capacity {
            self.rows.pop_front();
        }
        self.rows.push_back((row, tag));
    }
}

/// Pairwise-enumeration AUC with ties counted one half.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Percentile by sorting and indexing at `q·(N−1)` with linear
/// interpolation.
pub fn sort_index_percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (v.len() - 1) as f64;
    let i = pos as usize;
    if i + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[i] + (pos - i as f64) * (v[i + 1] - v[i])
}
