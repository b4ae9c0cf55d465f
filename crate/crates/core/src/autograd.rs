//! A small reverse-mode tape. Each forward pass builds a fresh [`Graph`];
//! [`Graph::backward`] walks it in reverse and returns per-node gradients.
//!
//! Only the operators the counting network needs are provided. Masks passed
//! to [`Graph::mul_const`] are constants: no gradient flows into them.

use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub const BN_EPS: f64 = 1e-5;

enum Op {
    Input,
    Param,
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64>, batch_stats: bool },
    Relu(Var),
    Sigmoid(Var),
    MaxPool2 { x: Var, argmax: Vec<usize> },
    UpsampleNearest { x: Var, factor: usize },
    ConcatChannels { a: Var, b: Var },
    MulConst { x: Var, c: Tensor },
    AttnScores { f: Var, v: Var },
    AttnRead { a: Var, v: Var },
    DensityLoss { pred: Var, gt: Tensor, start: usize, end: usize },
    Bce { pred: Var, gt: Tensor, start: usize, end: usize },
    AttnConsistency { a: Var },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics observed by a training-mode batch-norm node, for the
/// caller to fold into running averages.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Param, true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let y = tensor::conv2d(self.value(x), self.value(w), self.value(b), pad);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(y, Op::Conv2d { x, w, b, pad }, ng)
    }

    /// Batch normalisation over `(N, H, W)` per channel. With `running =
    /// Some((mean, var))` the stored statistics are used (inference);
    /// otherwise batch statistics are used and returned.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> (Var, Option<BatchStats>) {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let hw = h * w;
        let m = (n * hw) as f64;
        let (mean, var, stats) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec(), None),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let p = &xv.data()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                        mean[ci] += p.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for ni in 0..n {
                    for ci in 0..c {
                        let p = &xv.data()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                        var[ci] += p.iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
                    }
                }
                let unbiased = var.iter().map(|v| v / (m - 1.0).max(1.0)).collect();
                var.iter_mut().for_each(|v| *v /= m);
                let stats = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = Tensor::zeros(xv.shape());
        let mut y = Tensor::zeros(xv.shape());
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * hw;
                for i in off..off + hw {
                    let xh = (xv.data()[i] - mean[ci]) * inv_std[ci];
                    xhat.data_mut()[i] = xh;
                    y.data_mut()[i] = g[ci] * xh + bt[ci];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let batch_stats = stats.is_some();
        let v = self.push(y, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }, ng);
        (v, stats)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(y, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let ng = self.ng(x);
        self.push(y, Op::Sigmoid(x), ng)
    }

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (y, argmax) = tensor::max_pool2(self.value(x));
        let ng = self.ng(x);
        self.push(y, Op::MaxPool2 { x, argmax }, ng)
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        if factor == 1 {
            return x;
        }
        let y = tensor::upsample_nearest(self.value(x), factor);
        let ng = self.ng(x);
        self.push(y, Op::UpsampleNearest { x, factor }, ng)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat_channels: mismatched dims");
        let hw = h * w;
        let mut y = Tensor::zeros(&[n, ca + cb, h, w]);
        for ni in 0..n {
            let dst = &mut y.data_mut()[ni * (ca + cb) * hw..(ni + 1) * (ca + cb) * hw];
            dst[..ca * hw].copy_from_slice(&self.value(a).data()[ni * ca * hw..(ni + 1) * ca * hw]);
            dst[ca * hw..].copy_from_slice(&self.value(b).data()[ni * cb * hw..(ni + 1) * cb * hw]);
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::ConcatChannels { a, b }, ng)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Var {
        assert_eq!(self.value(x).shape(), c.shape(), "mul_const: shape mismatch");
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().zip(c.data()).for_each(|(a, b)| *a *= b);
        let ng = self.ng(x);
        self.push(y, Op::MulConst { x, c }, ng)
    }

    /// Row-softmax attention of every spatial feature vector of `f`
    /// (`[N, C, H, W]`) over the rows of `v` (`[M, C]`). Output is
    /// `[N·H·W, M]`, rows ordered by `(n, y, x)`.
    pub fn attn_scores(&mut self, f: Var, v: Var) -> Var {
        let a = attention_scores(self.value(f), self.value(v));
        let ng = self.ng(f) || self.ng(v);
        self.push(a, Op::AttnScores { f, v }, ng)
    }

    /// Convex combination of memory rows: `[N·H·W, M] × [M, C] → [N, C, H, W]`.
    /// `like` supplies the spatial layout.
    pub fn attn_read(&mut self, a: Var, v: Var, like: (usize, usize, usize)) -> Var {
        let r = attention_read(self.value(a), self.value(v), like);
        let ng = self.ng(a) || self.ng(v);
        self.push(r, Op::AttnRead { a, v }, ng)
    }

    /// Per-image summed squared error over batch entries `[start, end)`,
    /// averaged over those entries.
    pub fn density_loss(&mut self, pred: Var, gt: Tensor, start: usize, end: usize) -> Var {
        assert_eq!(self.value(pred).shape(), gt.shape(), "density_loss: shape mismatch");
        let per: usize = gt.shape()[1..].iter().product();
        let p = &self.value(pred).data()[start * per..end * per];
        let g = &gt.data()[start * per..end * per];
        let s: f64 = p.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum();
        let val = s / (end - start) as f64;
        let ng = self.ng(pred);
        self.push(Tensor::from_vec(&[1], vec![val]), Op::DensityLoss { pred, gt, start, end }, ng)
    }

    /// Mean binary cross-entropy over entries of batch items `[start, end)`;
    /// probabilities are clamped to `[1e-7, 1 − 1e-7]`.
    pub fn bce(&mut self, pred: Var, gt: Tensor, start: usize, end: usize) -> Var {
        assert_eq!(self.value(pred).shape(), gt.shape(), "bce: shape mismatch");
        let per: usize = gt.shape()[1..].iter().product();
        let p = &self.value(pred).data()[start * per..end * per];
        let g = &gt.data()[start * per..end * per];
        let val = bce_mean(p, g);
        let ng = self.ng(pred);
        self.push(Tensor::from_vec(&[1], vec![val]), Op::Bce { pred, gt, start, end }, ng)
    }

    /// Mean squared Euclidean distance between row `r` and row `r + R/2`
    /// of an `[R, M]` attention matrix (first half: original stream,
    /// second half: augmented stream).
    pub fn attn_consistency(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, m) = (av.shape()[0], av.shape()[1]);
        let half = rows / 2;
        let d = av.data();
        let s: f64 = (0..half * m).map(|i| (d[i] - d[i + half * m]).powi(2)).sum();
        let val = s / half as f64;
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&[1], vec![val]), Op::AttnConsistency { a }, ng)
    }

    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let val: f64 = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(Tensor::from_vec(&[1], vec![val]), Op::WeightedSum(terms), ng)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Conv2d { x, w, b, pad } => {
                let (dx, dw, db) =
                    tensor::conv2d_backward(self.value(*x), self.value(*w), dy, *pad, self.ng(*x));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let (n, c, h, w) = dy.dims4();
                let hw = h * w;
                let m = (n * hw) as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * hw;
                        for i in off..off + hw {
                            dgamma[ci] += dy.data()[i] * xhat.data()[i];
                            dbeta[ci] += dy.data()[i];
                        }
                    }
                }
                if self.ng(*x) {
                    let g = self.value(*gamma).data();
                    let mut dx = Tensor::zeros(dy.shape());
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * hw;
                            for i in off..off + hw {
                                let dxhat = dy.data()[i] * g[ci];
                                dx.data_mut()[i] = if *batch_stats {
                                    inv_std[ci] / m
                                        * (m * dxhat - g[ci] * dbeta[ci] - g[ci] * xhat.data()[i] * dgamma[ci])
                                } else {
                                    dxhat * inv_std[ci]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, Tensor::from_vec(&[c], dgamma));
                self.accumulate(grads, *beta, Tensor::from_vec(&[c], dbeta));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut dx = dy.clone();
                dx.data_mut().iter_mut().zip(xv.data()).for_each(|(d, &v)| {
                    if v <= 0.0 {
                        *d = 0.0
                    }
                });
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let mut dx = dy.clone();
                dx.data_mut()
                    .iter_mut()
                    .zip(node.value.data())
                    .for_each(|(d, &y)| *d *= y * (1.0 - y));
                self.accumulate(grads, *x, dx);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                for (o, &i) in argmax.iter().enumerate() {
                    dx.data_mut()[i] += dy.data()[o];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::UpsampleNearest { x, factor } => {
                self.accumulate(grads, *x, tensor::sum_pool(dy, *factor));
            }
            Op::ConcatChannels { a, b } => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).dims4().1;
                let hw = h * w;
                let mut da = Tensor::zeros(&[n, ca, h, w]);
                let mut db = Tensor::zeros(&[n, cb, h, w]);
                for ni in 0..n {
                    let src = &dy.data()[ni * (ca + cb) * hw..(ni + 1) * (ca + cb) * hw];
                    da.data_mut()[ni * ca * hw..(ni + 1) * ca * hw].copy_from_slice(&src[..ca * hw]);
                    db.data_mut()[ni * cb * hw..(ni + 1) * cb * hw].copy_from_slice(&src[ca * hw..]);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::MulConst { x, c } => {
                let mut dx = dy.clone();
                dx.data_mut().iter_mut().zip(c.data()).for_each(|(d, m)| *d *= m);
                self.accumulate(grads, *x, dx);
            }
            Op::AttnScores { f, v } => {
                let (df, dv) = attention_scores_backward(self.value(*f), self.value(*v), &node.value, dy);
                self.accumulate(grads, *f, df);
                self.accumulate(grads, *v, dv);
            }
            Op::AttnRead { a, v } => {
                let (da, dv) = attention_read_backward(self.value(*a), self.value(*v), dy);
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *v, dv);
            }
            Op::DensityLoss { pred, gt, start, end } => {
                let per: usize = gt.shape()[1..].iter().product();
                let scale = 2.0 * dy.data()[0] / (end - start) as f64;
                let pv = self.value(*pred);
                let mut dp = Tensor::zeros(pv.shape());
                for i in start * per..end * per {
                    dp.data_mut()[i] = scale * (pv.data()[i] - gt.data()[i]);
                }
                self.accumulate(grads, *pred, dp);
            }
            Op::Bce { pred, gt, start, end } => {
                let per: usize = gt.shape()[1..].iter().product();
                let count = ((end - start) * per) as f64;
                let pv = self.value(*pred);
                let mut dp = Tensor::zeros(pv.shape());
                for i in start * per..end * per {
                    let p = pv.data()[i];
                    let g = gt.data()[i];
                    if p > BCE_CLAMP && p < 1.0 - BCE_CLAMP {
                        dp.data_mut()[i] = dy.data()[0] * (p - g) / (p * (1.0 - p)) / count;
                    }
                }
                self.accumulate(grads, *pred, dp);
            }
            Op::AttnConsistency { a } => {
                let av = self.value(*a);
                let (rows, m) = (av.shape()[0], av.shape()[1]);
                let half = rows / 2;
                let s = 2.0 * dy.data()[0] / half as f64;
                let mut da = Tensor::zeros(av.shape());
                for i in 0..half * m {
                    let d = s * (av.data()[i] - av.data()[i + half * m]);
                    da.data_mut()[i] = d;
                    da.data_mut()[i + half * m] = -d;
                }
                self.accumulate(grads, *a, da);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, Tensor::from_vec(&[1], vec![w * dy.data()[0]]));
                }
            }
        }
    }
}

pub const BCE_CLAMP: f64 = 1e-7;

pub(crate) fn bce_mean(p: &[f64], g: &[f64]) -> f64 {
    let s: f64 = p
        .iter()
        .zip(g)
        .map(|(&p, &g)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
        })
        .sum();
    s / p.len() as f64
}

/// `softmax(F·Vᵀ / √C)` over memory rows for every spatial position.
pub(crate) fn attention_scores(f: &Tensor, v: &Tensor) -> Tensor {
    let (n, c, h, w) = f.dims4();
    let (m, cv) = (v.shape()[0], v.shape()[1]);
    assert_eq!(c, cv, "attention: feature dim {c} != memory dim {cv}");
    let hw = h * w;
    let scale = 1.0 / (c as f64).sqrt();
    let mut a = Tensor::zeros(&[n * hw, m]);
    for ni in 0..n {
        let fs = &f.data()[ni * c * hw..(ni + 1) * c * hw];
        let out = &mut a.data_mut()[ni * hw * m..(ni + 1) * hw * m];
        gemm_rows_by_memory(hw, c, m, scale, fs, v.data(), out);
    }
    for row in a.data_mut().chunks_mut(m) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            s += *x;
        }
        row.iter_mut().for_each(|x| *x /= s);
    }
    a
}

// logits (hw × m) = F_rowsᵀ-view (hw × c) · Vᵀ (c × m)
fn gemm_rows_by_memory(hw: usize, c: usize, m: usize, alpha: f64, fs: &[f64], v: &[f64], out: &mut [f64]) {
    tensor::gemm(hw, c, m, alpha, fs, 1, hw, v, 1, c, 0.0, out, m, 1);
}

pub(crate) fn attention_read(a: &Tensor, v: &Tensor, (c, h, w): (usize, usize, usize)) -> Tensor {
    let (rows, m) = (a.shape()[0], a.shape()[1]);
    assert_eq!(v.shape(), &[m, c], "attention read: memory shape mismatch");
    let hw = h * w;
    let n = rows / hw;
    let mut r = Tensor::zeros(&[n, c, h, w]);
    for ni in 0..n {
        let an = &a.data()[ni * hw * m..(ni + 1) * hw * m];
        let out = &mut r.data_mut()[ni * c * hw..(ni + 1) * c * hw];
        tensor::gemm(hw, m, c, 1.0, an, m, 1, v.data(), c, 1, 0.0, out, 1, hw);
    }
    r
}

fn attention_read_backward(a: &Tensor, v: &Tensor, dr: &Tensor) -> (Tensor, Tensor) {
    let (n, c, h, w) = dr.dims4();
    let m = v.shape()[0];
    let hw = h * w;
    let mut da = Tensor::zeros(a.shape());
    let mut dv = Tensor::zeros(v.shape());
    for ni in 0..n {
        let drs = &dr.data()[ni * c * hw..(ni + 1) * c * hw];
        let an = &a.data()[ni * hw * m..(ni + 1) * hw * m];
        let dan = &mut da.data_mut()[ni * hw * m..(ni + 1) * hw * m];
        // dA = dR_rows (hw×c) · Vᵀ (c×m)
        tensor::gemm(hw, c, m, 1.0, drs, 1, hw, v.data(), 1, c, 0.0, dan, m, 1);
        // dV += Aᵀ (m×hw) · dR_rows (hw×c)
        tensor::gemm(m, hw, c, 1.0, an, 1, m, drs, 1, hw, 1.0, dv.data_mut(), c, 1);
    }
    (da, dv)
}

fn attention_scores_backward(f: &Tensor, v: &Tensor, a: &Tensor, da: &Tensor) -> (Tensor, Tensor) {
    let (n, c, h, w) = f.dims4();
    let m = v.shape()[0];
    let hw = h * w;
    let scale = 1.0 / (c as f64).sqrt();
    // softmax Jacobian: dL = A ⊙ (dA − ⟨dA, A⟩_row)
    let mut dl = Tensor::zeros(a.shape());
    for ((dl_row, a_row), da_row) in dl
        .data_mut()
        .chunks_mut(m)
        .zip(a.data().chunks(m))
        .zip(da.data().chunks(m))
    {
        let dot: f64 = a_row.iter().zip(da_row).map(|(x, y)| x * y).sum();
        for ((o, &ai), &di) in dl_row.iter_mut().zip(a_row).zip(da_row) {
            *o = ai * (di - dot);
        }
    }
    let mut df = Tensor::zeros(f.shape());
    let mut dv = Tensor::zeros(v.shape());
    for ni in 0..n {
        let dln = &dl.data()[ni * hw * m..(ni + 1) * hw * m];
        let fs = &f.data()[ni * c * hw..(ni + 1) * c * hw];
        let dfs = &mut df.data_mut()[ni * c * hw..(ni + 1) * c * hw];
        // dF_rows (hw×c) = dL (hw×m) · V (m×c) / √C, written back in CHW layout
        tensor::gemm(hw, m, c, scale, dln, m, 1, v.data(), c, 1, 0.0, dfs, 1, hw);
        // dV += dLᵀ (m×hw) · F_rows (hw×c) / √C
        tensor::gemm(m, hw, c, scale, dln, 1, m, fs, 1, hw, 1.0, dv.data_mut(), c, 1);
    }
    (df, dv)
}
