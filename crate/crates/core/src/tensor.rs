//! Dense row-major `f64` tensors and the raw kernels the autograd graph is
//! built from (im2col convolution, pooling, resampling, GEMM).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Panics when `data.len()` does not match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self::from_vec(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected NCHW tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of batch entries `[start, end)` of a tensor whose first axis is the batch.
    pub fn batch_slice(&self, start: usize, end: usize) -> Self {
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self::from_vec(&shape, self.data[start * per..end * per].to_vec())
    }

    /// Concatenate along the leading (batch) axis.
    pub fn concat_batch(parts: &[&Tensor]) -> Self {
        assert!(!parts.is_empty());
        let tail = &parts[0].shape[1..];
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            assert_eq!(&p.shape[1..], tail, "batch concat with mismatched trailing dims");
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(tail);
        Self::from_vec(&shape, data)
    }
}

/// `C = alpha * A·B + beta * C` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= extent(m, k, rsa, csa), "gemm: A out of bounds");
    assert!(b.len() >= extent(k, n, rsb, csb), "gemm: B out of bounds");
    assert!(c.len() >= extent(m, n, rsc, csc), "gemm: C out of bounds");
    // SAFETY: every index touched by dgemm lies within the extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Unfold one `c×h×w` image into a `(c·k·k) × (h·w)` patch matrix for a
/// stride-1 convolution with symmetric zero padding `pad`.
pub(crate) fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [f64]) {
    let hw = h * w;
    debug_assert_eq!(cols.len(), c * k * k * hw);
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let dst = &mut cols[row..row + hw];
                let (x_lo, x_hi) = valid_range(w, kx, pad);
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad as isize;
                    let line = &mut dst[oy * w..(oy + 1) * w];
                    if iy < 0 || iy >= h as isize || x_lo >= x_hi {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    line[..x_lo].fill(0.0);
                    line[x_hi..].fill(0.0);
                    let shift = kx as isize - pad as isize;
                    let s0 = (x_lo as isize + shift) as usize;
                    line[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the image.
pub(crate) fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize, dx: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let src = &cols[row..row + hw];
                let (x_lo, x_hi) = valid_range(w, kx, pad);
                if x_lo >= x_hi {
                    continue;
                }
                let shift = kx as isize - pad as isize;
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let s0 = (x_lo as isize + shift) as usize;
                    for (d, s) in dst[s0..s0 + (x_hi - x_lo)]
                        .iter_mut()
                        .zip(&src[oy * w + x_lo..oy * w + x_hi])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
}

// Output columns `ox` whose input column `ox + kx - pad` is inside the image.
fn valid_range(w: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (w as isize + pad as isize - kx as isize).clamp(0, w as isize) as usize;
    (lo.min(w), hi)
}

/// Stride-1 "same" convolution. `w` is `[cout, cin, k, k]`, `b` is `[cout]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Tensor {
    let (n, cin, h, wd) = x.dims4();
    let cout = w.shape()[0];
    let k = w.shape()[2];
    assert_eq!(w.shape()[1], cin, "conv2d: channel mismatch");
    assert_eq!(2 * pad + 1, k, "conv2d: only same-padding odd kernels are supported");
    let hw = h * wd;
    let kk = cin * k * k;
    let mut out = Tensor::zeros(&[n, cout, h, wd]);
    let mut cols = if k == 1 { Vec::new() } else { vec![0.0; kk * hw] };
    for ni in 0..n {
        let xs = &x.data()[ni * cin * hw..(ni + 1) * cin * hw];
        let patches: &[f64] = if k == 1 {
            xs
        } else {
            im2col(xs, cin, h, wd, k, pad, &mut cols);
            &cols
        };
        let ys = &mut out.data_mut()[ni * cout * hw..(ni + 1) * cout * hw];
        for (co, plane) in ys.chunks_mut(hw).enumerate() {
            plane.fill(b.data()[co]);
        }
        gemm(cout, kk, hw, 1.0, w.data(), kk, 1, patches, hw, 1, 1.0, ys, hw, 1);
    }
    out
}

/// Gradients of [`conv2d`]. `dx` is only computed when `need_dx`.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    pad: usize,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (n, cin, h, wd) = x.dims4();
    let cout = w.shape()[0];
    let k = w.shape()[2];
    let hw = h * wd;
    let kk = cin * k * k;
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[cout]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut cols = if k == 1 { Vec::new() } else { vec![0.0; kk * hw] };
    let mut dcols = if need_dx && k != 1 { vec![0.0; kk * hw] } else { Vec::new() };
    for ni in 0..n {
        let xs = &x.data()[ni * cin * hw..(ni + 1) * cin * hw];
        let dys = &dy.data()[ni * cout * hw..(ni + 1) * cout * hw];
        for (co, plane) in dys.chunks(hw).enumerate() {
            db.data_mut()[co] += plane.iter().sum::<f64>();
        }
        let patches: &[f64] = if k == 1 {
            xs
        } else {
            im2col(xs, cin, h, wd, k, pad, &mut cols);
            &cols
        };
        // dW += dY · colsᵀ
        gemm(cout, hw, kk, 1.0, dys, hw, 1, patches, 1, hw, 1.0, dw.data_mut(), kk, 1);
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[ni * cin * hw..(ni + 1) * cin * hw];
            if k == 1 {
                gemm(kk, cout, hw, 1.0, w.data(), 1, kk, dys, hw, 1, 1.0, dxs, hw, 1);
            } else {
                gemm(kk, cout, hw, 1.0, w.data(), 1, kk, dys, hw, 1, 0.0, &mut dcols, hw, 1);
                col2im(&dcols, cin, h, wd, k, pad, dxs);
            }
        }
    }
    (dx, dw, db)
}

/// 2×2 max pooling with stride 2; returns the pooled tensor and the flat
/// input index of every selected maximum.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut arg = vec![0usize; n * c * oh * ow];
    let xd = x.data();
    let od = out.data_mut();
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                od[o] = xd[best];
                arg[o] = best;
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour upsampling of the two spatial axes by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let xd = x.data();
    let od = out.data_mut();
    for p in 0..n * c {
        for oy in 0..oh {
            let src = &xd[p * h * w + (oy / factor) * w..p * h * w + (oy / factor + 1) * w];
            let dst = &mut od[p * oh * ow + oy * ow..p * oh * ow + (oy + 1) * ow];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = src[ox / factor];
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest`]: sum over each `factor×factor` block.
pub fn sum_pool(x: &Tensor, factor: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(h % factor == 0 && w % factor == 0, "sum_pool: dims not divisible by {factor}");
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let xd = x.data();
    let od = out.data_mut();
    for p in 0..n * c {
        for y in 0..h {
            for xx in 0..w {
                od[p * oh * ow + (y / factor) * ow + xx / factor] += xd[p * h * w + y * w + xx];
            }
        }
    }
    out
}

/// Bilinear resize (half-pixel centres, edge clamped) by an integer factor.
/// Every source pixel distributes a total weight of `factor²`, so dividing by
/// `factor²` afterwards preserves the map's sum.
pub fn upsample_bilinear(x: &Tensor, factor: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (h * factor, w * factor);
    let taps = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f64)> {
        (0..out_len)
            .map(|o| {
                let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(in_len - 1);
                let i1 = (i0 + 1).min(in_len - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ty = taps(oh, h);
    let tx = taps(ow, w);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let xd = x.data();
    let od = out.data_mut();
    for p in 0..n * c {
        let plane = &xd[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                od[p * oh * ow + oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Tensor {
        let (n, cin, h, wd) = x.dims4();
        let cout = w.shape()[0];
        let k = w.shape()[2];
        let mut out = Tensor::zeros(&[n, cout, h, wd]);
        for ni in 0..n {
            for co in 0..cout {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = y as isize + ky as isize - pad as isize;
                                    let ix = xx as isize + kx as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[((co * cin + ci) * k + ky) * k + kx]
                                        * x.data()[((ni * cin + ci) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        out.data_mut()[((ni * cout + co) * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, pad) in [(3, 1), (1, 0)] {
            let x = Tensor::randn(&[2, 3, 5, 7], 1.0, &mut rng);
            let w = Tensor::randn(&[4, 3, k, k], 1.0, &mut rng);
            let b = Tensor::randn(&[4], 1.0, &mut rng);
            let fast = conv2d(&x, &w, &b, pad);
            let slow = naive_conv(&x, &w, &b, pad);
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (c, h, w, k, pad) = (2, 4, 5, 3, 1);
        let x = Tensor::randn(&[c * h * w], 1.0, &mut rng);
        let y = Tensor::randn(&[c * k * k * h * w], 1.0, &mut rng);
        let mut cols = vec![0.0; y.len()];
        im2col(x.data(), c, h, w, k, pad, &mut cols);
        let lhs: f64 = cols.iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(y.data(), c, h, w, k, pad, &mut back);
        let rhs: f64 = back.iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn bilinear_upsample_preserves_mass_after_rescale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[1, 1, 5, 6], 1.0, &mut rng).map(f64::abs);
        let up = upsample_bilinear(&x, 8);
        assert_eq!(up.shape(), &[1, 1, 40, 48]);
        assert!((up.sum() / 64.0 - x.sum()).abs() < 1e-9 * x.sum().max(1.0));
    }

    #[test]
    fn max_pool_picks_block_maxima() {
        let x = Tensor::from_vec(&[1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0]);
        let (y, arg) = max_pool2(&x);
        assert_eq!(y.data(), &[5.0, 9.0]);
        assert_eq!(arg, vec![1, 6]);
    }
}
