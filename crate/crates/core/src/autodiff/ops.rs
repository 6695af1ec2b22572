use super::kernels::{self, split_axis, ConvGeom, MatGeom};
use super::{accumulate, Node, Op, Tape, Var};
use crate::error::{shape_err, Result};
use crate::{Scalar, Tensor};

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Exp,
    Log,
    Sigmoid,
    Tanh,
    LeakyRelu(f64),
    Softplus,
    Sqrt,
    Square,
    Abs,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::Softplus => "softplus",
            Unary::Sqrt => "sqrt",
            Unary::Square => "square",
            Unary::Abs => "abs",
        }
    }

    fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::LeakyRelu(a) => {
                if x >= S::zero() {
                    x
                } else {
                    x * S::c(a)
                }
            }
            Unary::Softplus => softplus(x),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Abs => x.abs(),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn deriv<S: Scalar>(self, x: S, y: S) -> S {
        match self {
            Unary::Exp => y,
            Unary::Log => x.recip(),
            Unary::Sigmoid => y * (S::one() - y),
            Unary::Tanh => S::one() - y * y,
            Unary::LeakyRelu(a) => {
                if x >= S::zero() {
                    S::one()
                } else {
                    S::c(a)
                }
            }
            Unary::Softplus => sigmoid(x),
            Unary::Sqrt => S::c(0.5) / y,
            Unary::Square => S::c(2.0) * x,
            Unary::Abs => {
                if x > S::zero() {
                    S::one()
                } else if x < S::zero() {
                    -S::one()
                } else {
                    S::zero()
                }
            }
        }
    }
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        (S::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(self.id, |t| t.shape().to_vec())
    }

    pub fn numel(&self) -> usize {
        self.tape.with_value(self.id, |t| t.numel())
    }

    /// Copy of the recorded value.
    pub fn value(&self) -> Tensor<S> {
        self.tape.with_value(self.id, |t| t.clone())
    }

    pub fn item(&self) -> S {
        self.tape.with_value(self.id, |t| t.item())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, S> {
        self.tape.constant(self.value())
    }

    fn binary(self, other: Var<'t, S>, kind: Bin) -> Result<Var<'t, S>> {
        self.tape.check(self)?;
        self.tape.check(other)?;
        let (name, value) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[other.id].value;
            let f = |x: S, y: S| match kind {
                Bin::Add => x + y,
                Bin::Sub => x - y,
                Bin::Mul => x * y,
                Bin::Div => x / y,
            };
            let name = match kind {
                Bin::Add => "add",
                Bin::Sub => "sub",
                Bin::Mul => "mul",
                Bin::Div => "div",
            };
            let value = if a.shape() == b.shape() {
                let d = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(a.shape(), d)?
            } else {
                let out = kernels::broadcast_shape(a.shape(), b.shape())?;
                let sa = kernels::bcast_strides(a.shape(), &out);
                let sb = kernels::bcast_strides(b.shape(), &out);
                let mut d = vec![S::zero(); out.iter().product()];
                let (ad, bd) = (a.data(), b.data());
                kernels::for_each_bcast(&out, &sa, &sb, |o, i, j| d[o] = f(ad[i], bd[j]));
                Tensor::new(&out, d)?
            };
            (name, value)
        };
        let op = match kind {
            Bin::Add => Op::Add(self.id, other.id),
            Bin::Sub => Op::Sub(self.id, other.id),
            Bin::Mul => Op::Mul(self.id, other.id),
            Bin::Div => Op::Div(self.id, other.id),
        };
        self.tape.push(name, value, op, &[self.id, other.id])
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, Bin::Add)
    }

    pub fn sub(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, Bin::Sub)
    }

    pub fn mul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, Bin::Mul)
    }

    pub fn div(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, Bin::Div)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t, S>> {
        self.tape.check(self)?;
        let v = self.tape.with_value(self.id, |t| t.map(|x| x * S::c(c)));
        self.tape.push("scale", v, Op::Scale(self.id, c), &[self.id])
    }

    pub fn neg(self) -> Result<Var<'t, S>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t, S>> {
        self.tape.check(self)?;
        let v = self.tape.with_value(self.id, |t| t.map(|x| x + S::c(c)));
        self.tape.push("add_scalar", v, Op::Shift(self.id), &[self.id])
    }

    fn matmul_impl(self, other: Var<'t, S>, trans_b: bool) -> Result<Var<'t, S>> {
        self.tape.check(self)?;
        self.tape.check(other)?;
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[other.id].value;
            let (geom, out) = MatGeom::new(a.shape(), b.shape(), trans_b)?;
            Tensor::new(&out, geom.forward(a.data(), b.data()))?
        };
        self.tape.push("matmul", value, Op::MatMul { a: self.id, b: other.id, trans_b }, &[self.id, other.id])
    }

    /// Matrix product of `[.., m, k]` and `[.., k, n]`; a rank-2 operand is
    /// shared across the batch of a rank-3 one.
    pub fn matmul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.matmul_impl(other, false)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.matmul_impl(other, true)
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, S>> {
        self.tape.check(self)?;
        let value = self.tape.with_value(self.id, |t| {
            let mut seen = vec![false; t.rank()];
            if perm.len() != t.rank() || perm.iter().any(|&p| p >= t.rank() || std::mem::replace(&mut seen[p], true)) {
                return Err(shape_err("permute", format!("{perm:?} for shape {:?}", t.shape())));
            }
            let (d, s) = kernels::permute(t.data(), t.shape(), perm);
            Tensor::new(&s, d)
        })?;
        self.tape.push("permute", value, Op::Permute { a: self.id, perm: perm.to_vec() }, &[self.id])
    }

    /// Swaps the two trailing axes.
    pub fn t(self) -> Result<Var<'t, S>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(shape_err("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, S>> {
        self.tape.check(self)?;
        let v = self.tape.with_value(self.id, |t| t.reshape(shape))?;
        self.tape.push("reshape", v, Op::Reshape(self.id), &[self.id])
    }

    fn softmax_impl(self, axis: usize, log: bool) -> Result<Var<'t, S>> {
        self.tape.check(self)?;
        let v = self.tape.with_value(self.id, |t| {
            if axis >= t.rank() {
                return Err(shape_err("softmax", format!("axis {axis} for shape {:?}", t.shape())));
            }
            Tensor::new(t.shape(), kernels::softmax_forward(t.data(), t.shape(), axis, log))
        })?;
        let name = if log { "log_softmax" } else { "softmax" };
        self.tape.push(name, v, Op::Softmax { a: self.id, axis, log }, &[self.id])
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, S>> {
        self.softmax_impl(axis, false)
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t, S>> {
        self.softmax_impl(axis, true)
    }

    /// `(x − μ)/√(σ² + eps)` per slice along `axis`, without affine terms.
    pub fn layernorm(self, axis: usize, eps: f64) -> Result<Var<'t, S>> {
        self.tape.check(self)?;
        if eps <= 0.0 {
            return Err(crate::Error::InvalidArgument(format!("layernorm eps must be positive, got {eps}")));
        }
        let v = self.tape.with_value(self.id, |t| {
            if axis >= t.rank() {
                return Err(shape_err("layernorm", format!("axis {axis} for shape {:?}", t.shape())));
            }
            Tensor::new(t.shape(), kernels::layernorm_forward(t.data(), t.shape(), axis, S::c(eps)))
        })?;
        self.tape.push("layernorm", v, Op::LayerNorm { a: self.id, axis, eps }, &[self.id])
    }

    /// Cross-correlation of `[B, C, H, W]` with an `[O, C, k, k]` kernel.
    pub fn conv2d(self, w: Var<'t, S>, stride: usize, pad: usize) -> Result<Var<'t, S>> {
        self.tape.check(self)?;
        self.tape.check(w)?;
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].value;
            let k = &inner.nodes[w.id].value;
            let geom = ConvGeom::new(x.shape(), k.shape(), stride, pad)?;
            Tensor::new(&geom.out_shape(), geom.forward(x.data(), k.data()))?
        };
        self.tape.push("conv2d", value, Op::Conv2d { x: self.id, w: w.id, stride, pad }, &[self.id, w.id])
    }

    /// Nearest-neighbour upsampling of the two trailing axes.
    pub fn upsample_nearest(self, factor: usize) -> Result<Var<'t, S>> {
        self.tape.check(self)?;
        if factor == 0 {
            return Err(crate::Error::InvalidArgument("upsample factor must be ≥ 1".into()));
        }
        let v = self.tape.with_value(self.id, |t| {
            if t.rank() < 2 {
                return Err(shape_err("upsample", "rank < 2"));
            }
            let (d, s) = kernels::upsample(t.data(), t.shape(), factor);
            Tensor::new(&s, d)
        })?;
        self.tape.push("upsample", v, Op::Upsample { a: self.id, factor }, &[self.id])
    }

    /// Mean over non-overlapping `factor×factor` blocks of the trailing axes.
    pub fn avg_pool(self, factor: usize) -> Result<Var<'t, S>> {
        self.tape.check(self)?;
        let v = self.tape.with_value(self.id, |t| {
            let r = t.rank();
            if r < 2 || factor == 0 || t.shape()[r - 1] % factor != 0 || t.shape()[r - 2] % factor != 0 {
                return Err(shape_err("avg_pool", format!("factor {factor} for {:?}", t.shape())));
            }
            let (d, s) = kernels::block_sum(t.data(), t.shape(), factor);
            let inv = S::c(1.0 / (factor * factor) as f64);
            Tensor::new(&s, d.into_iter().map(|x| x * inv).collect())
        })?;
        self.tape.push("avg_pool", v, Op::AvgPool { a: self.id, factor }, &[self.id])
    }

    pub fn unary(self, kind: Unary) -> Result<Var<'t, S>> {
        self.tape.check(self)?;
        let v = self.tape.with_value(self.id, |t| t.map(|x| kind.apply(x)));
        self.tape.push(kind.name(), v, Op::Unary { a: self.id, kind }, &[self.id])
    }

    pub fn exp(self) -> Result<Var<'t, S>> {
        self.unary(Unary::Exp)
    }

    pub fn ln(self) -> Result<Var<'t, S>> {
        self.unary(Unary::Log)
    }

    pub fn sigmoid(self) -> Result<Var<'t, S>> {
        self.unary(Unary::Sigmoid)
    }

    pub fn tanh(self) -> Result<Var<'t, S>> {
        self.unary(Unary::Tanh)
    }

    pub fn leaky_relu(self, alpha: f64) -> Result<Var<'t, S>> {
        self.unary(Unary::LeakyRelu(alpha))
    }

    pub fn softplus(self) -> Result<Var<'t, S>> {
        self.unary(Unary::Softplus)
    }

    pub fn sqrt(self) -> Result<Var<'t, S>> {
        self.unary(Unary::Sqrt)
    }

    pub fn square(self) -> Result<Var<'t, S>> {
        self.unary(Unary::Square)
    }

    pub fn abs(self) -> Result<Var<'t, S>> {
        self.unary(Unary::Abs)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(self) -> Result<Var<'t, S>> {
        self.tape.check(self)?;
        let v = self.tape.with_value(self.id, |t| Tensor::scalar(t.sum()));
        self.tape.push("sum", v, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Result<Var<'t, S>> {
        let n = self.numel();
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, S>> {
        self.tape.check(self)?;
        let v = self.tape.with_value(self.id, |t| {
            if axis >= t.rank() {
                return Err(shape_err("sum_axis", format!("axis {axis} for shape {:?}", t.shape())));
            }
            let (outer, len, inner) = split_axis(t.shape(), axis);
            let mut d = vec![S::zero(); outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        d[o * inner + i] += t.data()[(o * len + j) * inner + i];
                    }
                }
            }
            let mut s = t.shape().to_vec();
            s[axis] = 1;
            Tensor::new(&s, d)
        })?;
        self.tape.push("sum_axis", v, Op::SumAxis { a: self.id, axis }, &[self.id])
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, S>> {
        let n = self.shape().get(axis).copied().unwrap_or(1);
        self.sum_axis(axis)?.scale(1.0 / n as f64)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, S>> {
        self.tape.check(self)?;
        let v = self.tape.with_value(self.id, |t| {
            if axis >= t.rank() || start + len > t.shape()[axis] {
                return Err(shape_err("narrow", format!("[{start}, {}) on axis {axis} of {:?}", start + len, t.shape())));
            }
            let (outer, full, inner) = split_axis(t.shape(), axis);
            let mut d = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * full + start) * inner;
                d.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            let mut s = t.shape().to_vec();
            s[axis] = len;
            Tensor::new(&s, d)
        })?;
        self.tape.push("narrow", v, Op::Slice { a: self.id, axis, start }, &[self.id])
    }

    /// `max(x, min)` elementwise; gradient passes only where `x > min`.
    pub fn clamp_min(self, min: f64) -> Result<Var<'t, S>> {
        self.tape.check(self)?;
        let m = S::c(min);
        let v = self.tape.with_value(self.id, |t| t.map(|x| x.max(m)));
        self.tape.push("clamp_min", v, Op::ClampMin { a: self.id, min }, &[self.id])
    }
}

impl<S: Scalar> Tape<S> {
    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, S>], axis: usize) -> Result<Var<'t, S>> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        for p in parts {
            self.check(*p)?;
        }
        let value = {
            let inner = self.inner.borrow();
            let base = inner.nodes[first.id].value.shape().to_vec();
            if axis >= base.len() {
                return Err(shape_err("concat", format!("axis {axis} for {base:?}")));
            }
            let mut total = 0;
            for p in parts {
                let s = inner.nodes[p.id].value.shape();
                let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !ok {
                    return Err(shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}")));
                }
                total += s[axis];
            }
            let (outer, _, inner_len) = split_axis(&base, axis);
            let mut d = Vec::with_capacity(outer * total * inner_len);
            for o in 0..outer {
                for p in parts {
                    let t = &inner.nodes[p.id].value;
                    let len = t.shape()[axis] * inner_len;
                    d.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
                }
            }
            let mut s = base.clone();
            s[axis] = total;
            Tensor::new(&s, d)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.push("concat", value, Op::Concat { parts: ids.clone(), axis }, &ids)
    }
}

pub(super) fn backward_node<S: Scalar>(
    nodes: &[Node<S>],
    id: usize,
    g: &Tensor<S>,
    grads: &mut [Option<Tensor<S>>],
) -> Result<()> {
    let val = |i: usize| &nodes[i].value;
    let want = |i: usize| nodes[i].requires_grad;
    let gd = g.data();
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            let out = g.shape();
            if want(a) {
                let ga = kernels::reduce_to(gd, out, val(a).shape());
                accumulate(&mut grads[a], val(a).shape(), ga);
            }
            if want(b) {
                let mut gb = kernels::reduce_to(gd, out, val(b).shape());
                if matches!(nodes[id].op, Op::Sub(..)) {
                    gb.iter_mut().for_each(|v| *v = -*v);
                }
                accumulate(&mut grads[b], val(b).shape(), gb);
            }
        }
        &Op::Mul(a, b) | &Op::Div(a, b) => {
            let is_div = matches!(nodes[id].op, Op::Div(..));
            let out = g.shape();
            let (av, bv) = (val(a), val(b));
            let sa = kernels::bcast_strides(av.shape(), out);
            let sb = kernels::bcast_strides(bv.shape(), out);
            let (ad, bd) = (av.data(), bv.data());
            if want(a) {
                let mut ga = vec![S::zero(); av.numel()];
                kernels::for_each_bcast(out, &sa, &sb, |o, i, j| {
                    ga[i] += if is_div { gd[o] / bd[j] } else { gd[o] * bd[j] }
                });
                accumulate(&mut grads[a], av.shape(), ga);
            }
            if want(b) {
                let mut gb = vec![S::zero(); bv.numel()];
                kernels::for_each_bcast(out, &sa, &sb, |o, i, j| {
                    gb[j] += if is_div { -gd[o] * ad[i] / (bd[j] * bd[j]) } else { gd[o] * ad[i] }
                });
                accumulate(&mut grads[b], bv.shape(), gb);
            }
        }
        &Op::Scale(a, c) => {
            let c = S::c(c);
            accumulate(&mut grads[a], val(a).shape(), gd.iter().map(|&v| v * c).collect());
        }
        &Op::Shift(a) | &Op::Reshape(a) => {
            accumulate(&mut grads[a], val(a).shape(), gd.to_vec());
        }
        &Op::MatMul { a, b, trans_b } => {
            let (geom, _) = MatGeom::new(val(a).shape(), val(b).shape(), trans_b)?;
            if want(a) {
                let ga = geom.grad_a(gd, val(b).data());
                accumulate(&mut grads[a], val(a).shape(), ga);
            }
            if want(b) {
                let gb = geom.grad_b(gd, val(a).data());
                accumulate(&mut grads[b], val(b).shape(), gb);
            }
        }
        Op::Permute { a, perm } => {
            let inv = kernels::inverse_perm(perm);
            let (d, _) = kernels::permute(gd, g.shape(), &inv);
            accumulate(&mut grads[*a], val(*a).shape(), d);
        }
        &Op::Softmax { a, axis, log } => {
            let d = kernels::softmax_backward(gd, nodes[id].value.data(), g.shape(), axis, log);
            accumulate(&mut grads[a], val(a).shape(), d);
        }
        &Op::LayerNorm { a, axis, eps } => {
            let d = kernels::layernorm_backward(gd, val(a).data(), g.shape(), axis, S::c(eps));
            accumulate(&mut grads[a], val(a).shape(), d);
        }
        &Op::Conv2d { x, w, stride, pad } => {
            let geom = ConvGeom::new(val(x).shape(), val(w).shape(), stride, pad)?;
            let (gx, gw) = geom.backward(gd, val(x).data(), val(w).data(), want(x), want(w));
            if let Some(gx) = gx {
                accumulate(&mut grads[x], val(x).shape(), gx);
            }
            if let Some(gw) = gw {
                accumulate(&mut grads[w], val(w).shape(), gw);
            }
        }
        &Op::Upsample { a, factor } => {
            let (d, _) = kernels::block_sum(gd, g.shape(), factor);
            accumulate(&mut grads[a], val(a).shape(), d);
        }
        &Op::AvgPool { a, factor } => {
            let inv = S::c(1.0 / (factor * factor) as f64);
            let (d, _) = kernels::upsample(gd, g.shape(), factor);
            accumulate(&mut grads[a], val(a).shape(), d.into_iter().map(|v| v * inv).collect());
        }
        &Op::Unary { a, kind } => {
            let (x, y) = (val(a).data(), nodes[id].value.data());
            let d = gd.iter().zip(x).zip(y).map(|((&g, &x), &y)| g * kind.deriv(x, y)).collect();
            accumulate(&mut grads[a], val(a).shape(), d);
        }
        &Op::Sum(a) => {
            accumulate(&mut grads[a], val(a).shape(), vec![gd[0]; val(a).numel()]);
        }
        &Op::SumAxis { a, axis } => {
            let shape = val(a).shape();
            let (outer, len, inner) = split_axis(shape, axis);
            let mut d = vec![S::zero(); val(a).numel()];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        d[(o * len + j) * inner + i] = gd[o * inner + i];
                    }
                }
            }
            accumulate(&mut grads[a], shape, d);
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(g.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                if want(p) {
                    let mut d = Vec::with_capacity(val(p).numel());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&gd[base..base + len * inner]);
                    }
                    accumulate(&mut grads[p], val(p).shape(), d);
                }
                offset += len;
            }
        }
        &Op::Slice { a, axis, start } => {
            let shape = val(a).shape();
            let (outer, full, inner) = split_axis(shape, axis);
            let len = g.shape()[axis];
            let mut d = vec![S::zero(); val(a).numel()];
            for o in 0..outer {
                let dst = (o * full + start) * inner;
                d[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(&mut grads[a], shape, d);
        }
        &Op::ClampMin { a, min } => {
            let m = S::c(min);
            let d = gd.iter().zip(val(a).data()).map(|(&g, &x)| if x > m { g } else { S::zero() }).collect();
            accumulate(&mut grads[a], val(a).shape(), d);
        }
    }
    Ok(())
}
