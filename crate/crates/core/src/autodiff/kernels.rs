//! Numeric kernels shared by the forward and backward passes.

use crate::error::{shape_err, Result};
use crate::Scalar;

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err("broadcast", format!("{a:?} vs {b:?}"))),
        };
    }
    Ok(out)
}

/// Element strides of `shape` when broadcast to `out` (0 on broadcast axes).
pub(crate) fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let mut strides = vec![0; nd];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let o = nd - shape.len() + i;
        strides[o] = if shape[i] == 1 && out[o] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output element with the matching offsets into two broadcast inputs.
pub(crate) fn for_each_bcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let nd = out.len();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out[nd - 1];
    let (la, lb) = (sa[nd - 1], sb[nd - 1]);
    let outer: usize = out[..nd - 1].iter().product();
    let mut idx = vec![0usize; nd - 1];
    let (mut oa, mut ob, mut o) = (0usize, 0usize, 0usize);
    for _ in 0..outer {
        for j in 0..last {
            f(o + j, oa + j * la, ob + j * lb);
        }
        o += last;
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums a broadcast gradient back down to `shape`.
pub(crate) fn reduce_to<S: Scalar>(g: &[S], out: &[usize], shape: &[usize]) -> Vec<S> {
    if out == shape {
        return g.to_vec();
    }
    let mut r = vec![S::zero(); shape.iter().product()];
    let s = bcast_strides(shape, out);
    let zero = vec![0; out.len()];
    for_each_bcast(out, &s, &zero, |o, i, _| r[i] += g[o]);
    r
}

pub(crate) fn permute<S: Scalar>(data: &[S], shape: &[usize], perm: &[usize]) -> (Vec<S>, Vec<usize>) {
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let zero = vec![0; nd];
    for_each_bcast(&out_shape, &src_strides, &zero, |_, i, _| out.push(data[i]));
    (out, out_shape)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Batched matmul geometry: `a` is `[batch?, m, k]`, `b` is `[batch?, k, n]`
/// (or `[batch?, n, k]` when `trans_b`).
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatGeom {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub trans_b: bool,
}

impl MatGeom {
    pub fn new(a: &[usize], b: &[usize], trans_b: bool) -> Result<(Self, Vec<usize>)> {
        let bad = || shape_err("matmul", format!("{a:?} x {b:?} (trans_b={trans_b})"));
        if !(2..=3).contains(&a.len()) || !(2..=3).contains(&b.len()) {
            return Err(bad());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (bk, n) = if trans_b {
            (b[b.len() - 1], b[b.len() - 2])
        } else {
            (b[b.len() - 2], b[b.len() - 1])
        };
        if bk != k {
            return Err(bad());
        }
        let a_batched = a.len() == 3;
        let b_batched = b.len() == 3;
        let batch = match (a_batched, b_batched) {
            (true, true) if a[0] == b[0] => a[0],
            (true, true) => return Err(bad()),
            (true, false) => a[0],
            (false, true) => b[0],
            (false, false) => 1,
        };
        let out = if a_batched || b_batched { vec![batch, m, n] } else { vec![m, n] };
        Ok((Self { batch, m, k, n, a_batched, b_batched, trans_b }, out))
    }

    fn b_strides(&self) -> (usize, usize) {
        if self.trans_b {
            (1, self.k)
        } else {
            (self.n, 1)
        }
    }

    pub fn forward<S: Scalar>(&self, a: &[S], b: &[S]) -> Vec<S> {
        let Self { batch, m, k, n, .. } = *self;
        let mut out = vec![S::zero(); batch * m * n];
        for i in 0..batch {
            let ao = if self.a_batched { i * m * k } else { 0 };
            let bo = if self.b_batched { i * k * n } else { 0 };
            S::gemm(
                m,
                k,
                n,
                S::one(),
                &a[ao..ao + m * k],
                (k, 1),
                &b[bo..bo + k * n],
                self.b_strides(),
                S::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                (n, 1),
            );
        }
        out
    }

    /// Gradient w.r.t. `a`: `g · bᵀ`.
    pub fn grad_a<S: Scalar>(&self, g: &[S], b: &[S]) -> Vec<S> {
        let Self { batch, m, k, n, .. } = *self;
        let a_len = if self.a_batched { batch * m * k } else { m * k };
        let mut ga = vec![S::zero(); a_len];
        // bᵀ as a k-by-n -> n-by-k view
        let bt = if self.trans_b { (k, 1) } else { (1, n) };
        for i in 0..batch {
            let ao = if self.a_batched { i * m * k } else { 0 };
            let bo = if self.b_batched { i * k * n } else { 0 };
            S::gemm(
                m,
                n,
                k,
                S::one(),
                &g[i * m * n..(i + 1) * m * n],
                (n, 1),
                &b[bo..bo + k * n],
                bt,
                S::one(),
                &mut ga[ao..ao + m * k],
                (k, 1),
            );
        }
        ga
    }

    /// Gradient w.r.t. `b` in `b`'s own layout.
    pub fn grad_b<S: Scalar>(&self, g: &[S], a: &[S]) -> Vec<S> {
        let Self { batch, m, k, n, .. } = *self;
        let b_len = if self.b_batched { batch * k * n } else { k * n };
        let mut gb = vec![S::zero(); b_len];
        for i in 0..batch {
            let ao = if self.a_batched { i * m * k } else { 0 };
            let bo = if self.b_batched { i * k * n } else { 0 };
            let gi = &g[i * m * n..(i + 1) * m * n];
            let ai = &a[ao..ao + m * k];
            if self.trans_b {
                // gb (n×k) = gᵀ (n×m) · a (m×k)
                S::gemm(n, m, k, S::one(), gi, (1, n), ai, (k, 1), S::one(), &mut gb[bo..bo + k * n], (k, 1));
            } else {
                // gb (k×n) = aᵀ (k×m) · g (m×n)
                S::gemm(k, m, n, S::one(), ai, (1, k), gi, (n, 1), S::one(), &mut gb[bo..bo + k * n], (n, 1));
            }
        }
        gb
    }
}

/// Geometry of a square-kernel 2-D cross-correlation over `[B, C, H, W]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub ks: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let bad = |d: &str| shape_err("conv2d", format!("x {x:?}, w {w:?}, stride {stride}, pad {pad}: {d}"));
        if x.len() != 4 || w.len() != 4 {
            return Err(bad("expected rank-4 input and kernel"));
        }
        if w[1] != x[1] {
            return Err(bad("channel mismatch"));
        }
        if w[2] != w[3] || w[2] % 2 == 0 {
            return Err(bad("kernel must be square with odd extent"));
        }
        if stride == 0 {
            return Err(bad("stride must be positive"));
        }
        let ks = w[2];
        if x[2] + 2 * pad < ks || x[3] + 2 * pad < ks {
            return Err(bad("input smaller than kernel"));
        }
        let oh = (x[2] + 2 * pad - ks) / stride + 1;
        let ow = (x[3] + 2 * pad - ks) / stride + 1;
        Ok(Self { b: x[0], c: x[1], h: x[2], w: x[3], o: w[0], ks, stride, pad, oh, ow })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.b, self.o, self.oh, self.ow]
    }

    fn ckk(&self) -> usize {
        self.c * self.ks * self.ks
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    /// Visits `(col_row, col_col, src_offset)` for every in-bounds tap of item `bi`.
    #[inline]
    fn taps(&self, mut f: impl FnMut(usize, usize)) {
        let (ks, s, pad) = (self.ks, self.stride as isize, self.pad as isize);
        let p = self.p();
        for c in 0..self.c {
            for ky in 0..ks {
                for kx in 0..ks {
                    let row = (c * ks + ky) * ks + kx;
                    for oy in 0..self.oh {
                        let iy = oy as isize * s + ky as isize - pad;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = ox as isize * s + kx as isize - pad;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(row * p + oy * self.ow + ox, (c * self.h + iy as usize) * self.w + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col<S: Scalar>(&self, x: &[S], col: &mut [S]) {
        col.iter_mut().for_each(|v| *v = S::zero());
        self.taps(|ci, xi| col[ci] = x[xi]);
    }

    pub fn forward<S: Scalar>(&self, x: &[S], w: &[S]) -> Vec<S> {
        let (ckk, p) = (self.ckk(), self.p());
        let in_len = self.c * self.h * self.w;
        let mut out = vec![S::zero(); self.b * self.o * p];
        let mut col = vec![S::zero(); ckk * p];
        for bi in 0..self.b {
            self.im2col(&x[bi * in_len..(bi + 1) * in_len], &mut col);
            S::gemm(
                self.o,
                ckk,
                p,
                S::one(),
                w,
                (ckk, 1),
                &col,
                (p, 1),
                S::zero(),
                &mut out[bi * self.o * p..(bi + 1) * self.o * p],
                (p, 1),
            );
        }
        out
    }

    /// Returns `(grad_x, grad_w)`; either may be skipped.
    pub fn backward<S: Scalar>(
        &self,
        g: &[S],
        x: &[S],
        w: &[S],
        want_x: bool,
        want_w: bool,
    ) -> (Option<Vec<S>>, Option<Vec<S>>) {
        let (ckk, p) = (self.ckk(), self.p());
        let in_len = self.c * self.h * self.w;
        let mut gx = want_x.then(|| vec![S::zero(); self.b * in_len]);
        let mut gw = want_w.then(|| vec![S::zero(); w.len()]);
        let mut col = vec![S::zero(); ckk * p];
        for bi in 0..self.b {
            let gi = &g[bi * self.o * p..(bi + 1) * self.o * p];
            if let Some(gw) = gw.as_mut() {
                self.im2col(&x[bi * in_len..(bi + 1) * in_len], &mut col);
                // gw (o×ckk) += g (o×p) · colᵀ (p×ckk)
                S::gemm(self.o, p, ckk, S::one(), gi, (p, 1), &col, (1, p), S::one(), gw, (ckk, 1));
            }
            if let Some(gx) = gx.as_mut() {
                // gcol (ckk×p) = wᵀ (ckk×o) · g (o×p)
                S::gemm(ckk, self.o, p, S::one(), w, (1, ckk), gi, (p, 1), S::zero(), &mut col, (p, 1));
                let gxi = &mut gx[bi * in_len..(bi + 1) * in_len];
                self.taps(|ci, xi| gxi[xi] += col[ci]);
            }
        }
        (gx, gw)
    }
}

pub(crate) fn softmax_forward<S: Scalar>(x: &[S], shape: &[usize], axis: usize, log: bool) -> Vec<S> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut y = vec![S::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = S::neg_infinity();
            for j in 0..len {
                mx = mx.max(x[base + j * inner]);
            }
            let mut sum = S::zero();
            for j in 0..len {
                sum += (x[base + j * inner] - mx).exp();
            }
            if log {
                let lse = sum.ln();
                for j in 0..len {
                    y[base + j * inner] = x[base + j * inner] - mx - lse;
                }
            } else {
                for j in 0..len {
                    y[base + j * inner] = (x[base + j * inner] - mx).exp() / sum;
                }
            }
        }
    }
    y
}

pub(crate) fn softmax_backward<S: Scalar>(g: &[S], y: &[S], shape: &[usize], axis: usize, log: bool) -> Vec<S> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut gx = vec![S::zero(); g.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            if log {
                let mut gs = S::zero();
                for j in 0..len {
                    gs += g[base + j * inner];
                }
                for j in 0..len {
                    let k = base + j * inner;
                    gx[k] = g[k] - y[k].exp() * gs;
                }
            } else {
                let mut dot = S::zero();
                for j in 0..len {
                    let k = base + j * inner;
                    dot += g[k] * y[k];
                }
                for j in 0..len {
                    let k = base + j * inner;
                    gx[k] = y[k] * (g[k] - dot);
                }
            }
        }
    }
    gx
}

fn slice_stats<S: Scalar>(x: &[S], base: usize, len: usize, inner: usize, eps: S) -> (S, S) {
    let n = S::c(len as f64);
    let mut mean = S::zero();
    for j in 0..len {
        mean += x[base + j * inner];
    }
    mean /= n;
    let mut var = S::zero();
    for j in 0..len {
        let d = x[base + j * inner] - mean;
        var += d * d;
    }
    var /= n;
    (mean, (var + eps).sqrt().recip())
}

pub(crate) fn layernorm_forward<S: Scalar>(x: &[S], shape: &[usize], axis: usize, eps: S) -> Vec<S> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut y = vec![S::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let (mean, rstd) = slice_stats(x, base, len, inner, eps);
            for j in 0..len {
                let k = base + j * inner;
                y[k] = (x[k] - mean) * rstd;
            }
        }
    }
    y
}

pub(crate) fn layernorm_backward<S: Scalar>(g: &[S], x: &[S], shape: &[usize], axis: usize, eps: S) -> Vec<S> {
    let (outer, len, inner) = split_axis(shape, axis);
    let n = S::c(len as f64);
    let mut gx = vec![S::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let (mean, rstd) = slice_stats(x, base, len, inner, eps);
            let mut gm = S::zero();
            let mut gxh = S::zero();
            for j in 0..len {
                let k = base + j * inner;
                gm += g[k];
                gxh += g[k] * (x[k] - mean) * rstd;
            }
            gm /= n;
            gxh /= n;
            for j in 0..len {
                let k = base + j * inner;
                let xh = (x[k] - mean) * rstd;
                gx[k] = rstd * (g[k] - gm - xh * gxh);
            }
        }
    }
    gx
}

/// Nearest-neighbour upsampling of the two trailing axes.
pub(crate) fn upsample<S: Scalar>(x: &[S], shape: &[usize], f: usize) -> (Vec<S>, Vec<usize>) {
    let nd = shape.len();
    let (h, w) = (shape[nd - 2], shape[nd - 1]);
    let planes: usize = shape[..nd - 2].iter().product();
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![S::zero(); planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            let src = &x[p * h * w + (y / f) * w..p * h * w + (y / f) * w + w];
            let dst = &mut out[p * oh * ow + y * ow..p * oh * ow + (y + 1) * ow];
            for (xo, d) in dst.iter_mut().enumerate() {
                *d = src[xo / f];
            }
        }
    }
    let mut os = shape.to_vec();
    os[nd - 2] = oh;
    os[nd - 1] = ow;
    (out, os)
}

/// Sums `f×f` blocks of the two trailing axes (the adjoint of [`upsample`]).
pub(crate) fn block_sum<S: Scalar>(x: &[S], shape: &[usize], f: usize) -> (Vec<S>, Vec<usize>) {
    let nd = shape.len();
    let (h, w) = (shape[nd - 2], shape[nd - 1]);
    let planes: usize = shape[..nd - 2].iter().product();
    let (oh, ow) = (h / f, w / f);
    let mut out = vec![S::zero(); planes * oh * ow];
    for p in 0..planes {
        for y in 0..h {
            for xx in 0..w {
                out[p * oh * ow + (y / f) * ow + xx / f] += x[p * h * w + y * w + xx];
            }
        }
    }
    let mut os = shape.to_vec();
    os[nd - 2] = oh;
    os[nd - 1] = ow;
    (out, os)
}
