//! Parameter storage and the handful of layers every network is built from.
//!
//! Weights are stored with unit variance and rescaled by `1/√fan_in` at use
//! time (equalized learning rate), so Adam sees comparable step sizes for
//! every layer.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::Result;
use crate::{Rng, Scalar, Tape, Tensor, Var};

/// Negative slope of every leaky ReLU in the model.
pub const LRELU_SLOPE: f64 = 0.2;

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

/// Index of a tensor inside a [`Params`] set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered, named collection of trainable tensors belonging to one network.
#[derive(Debug)]
pub struct Params<S> {
    uid: u64,
    names: Vec<String>,
    values: Vec<Tensor<S>>,
}

impl<S: Scalar> Clone for Params<S> {
    fn clone(&self) -> Self {
        Self { uid: fresh_uid(), names: self.names.clone(), values: self.values.clone() }
    }
}

impl<S: Scalar> Default for Params<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Params<S> {
    pub fn new() -> Self {
        Self { uid: fresh_uid(), names: Vec::new(), values: Vec::new() }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<S>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Same parameters converted to another scalar type. Parameter ids are
    /// preserved, so layers built against `self` work with the result.
    pub fn cast<T: Scalar>(&self) -> Params<T> {
        Params { uid: fresh_uid(), names: self.names.clone(), values: self.values.iter().map(Tensor::cast).collect() }
    }

    /// Stable 64-bit digest of all parameter bits (used to check phase isolation).
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.values {
            for v in t.data() {
                h ^= v.f64().to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
        h
    }
}

/// Fully connected layer `y = x·W·c + b` with equalized learning rate.
#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
    fan_in: usize,
    out: usize,
    lr_mul: f64,
}

impl Linear {
    pub fn new<S: Scalar>(
        params: &mut Params<S>,
        name: &str,
        fan_in: usize,
        out: usize,
        bias: Option<f64>,
        rng: &mut Rng,
    ) -> Self {
        Self::with_lr_mul(params, name, fan_in, out, bias, 1.0, rng)
    }

    /// `lr_mul` scales the effective learning rate of this layer (the mapping
    /// networks use 0.01).
    pub fn with_lr_mul<S: Scalar>(
        params: &mut Params<S>,
        name: &str,
        fan_in: usize,
        out: usize,
        bias: Option<f64>,
        lr_mul: f64,
        rng: &mut Rng,
    ) -> Self {
        let w = params.add(format!("{name}.weight"), Tensor::randn(&[fan_in, out], 1.0 / lr_mul, rng));
        let b = bias.map(|v| params.add(format!("{name}.bias"), Tensor::full(&[out], S::c(v / lr_mul))));
        Self { w, b, fan_in, out, lr_mul }
    }

    pub fn out_features(&self) -> usize {
        self.out
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }

    /// Applies the layer to `[.., n, fan_in]`.
    pub fn forward<'t, S: Scalar>(&self, tape: &'t Tape<S>, params: &Params<S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let w = tape.param(params, self.w);
        let y = x.matmul(w)?.scale(self.lr_mul / (self.fan_in as f64).sqrt())?;
        match self.b {
            Some(b) => {
                let b = tape.param(params, b);
                let b = if self.lr_mul == 1.0 { b } else { b.scale(self.lr_mul)? };
                y.add(b)
            }
            None => Ok(y),
        }
    }
}

/// Square-kernel convolution over `[B, C, H, W]` with equalized learning rate.
#[derive(Clone, Debug)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    fan_in: usize,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn new<S: Scalar>(
        params: &mut Params<S>,
        name: &str,
        cin: usize,
        cout: usize,
        ksize: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        let w = params.add(format!("{name}.weight"), Tensor::randn(&[cout, cin, ksize, ksize], 1.0, rng));
        let b = params.add(format!("{name}.bias"), Tensor::zeros(&[1, cout, 1, 1]));
        Self { w, b, fan_in: cin * ksize * ksize, stride, pad: ksize / 2 }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn forward<'t, S: Scalar>(&self, tape: &'t Tape<S>, params: &Params<S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let w = tape.param(params, self.w);
        let b = tape.param(params, self.b);
        x.conv2d(w, self.stride, self.pad)?.scale(1.0 / (self.fan_in as f64).sqrt())?.add(b)
    }
}

/// Stack of fully connected layers with leaky ReLU, applied row-wise.
#[derive(Clone, Debug)]
pub struct MappingNet {
    layers: Vec<Linear>,
    normalize_input: bool,
}

impl MappingNet {
    pub fn new<S: Scalar>(
        params: &mut Params<S>,
        name: &str,
        fan_in: usize,
        width: usize,
        depth: usize,
        lr_mul: f64,
        rng: &mut Rng,
    ) -> Self {
        let layers = (0..depth.max(1))
            .map(|i| {
                let cin = if i == 0 { fan_in } else { width };
                Linear::with_lr_mul(params, &format!("{name}.fc{i}"), cin, width, Some(0.0), lr_mul, rng)
            })
            .collect();
        Self { layers, normalize_input: false }
    }

    /// Normalizes each input row to unit second moment before the first layer.
    pub fn normalized(mut self) -> Self {
        self.normalize_input = true;
        self
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn forward<'t, S: Scalar>(&self, tape: &'t Tape<S>, params: &Params<S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let mut h = x;
        if self.normalize_input {
            let axis = h.shape().len() - 1;
            let ms = h.square()?.mean_axis(axis)?.add_scalar(1e-8)?.sqrt()?;
            h = h.div(ms)?;
        }
        for layer in &self.layers {
            h = layer.forward(tape, params, h)?.leaky_relu(LRELU_SLOPE)?;
        }
        Ok(h)
    }
}

/// Sinusoidal 2-axis positional encoding, `[h·w, dim]` (dim divisible by 4).
pub fn positional_encoding<S: Scalar>(h: usize, w: usize, dim: usize) -> Tensor<S> {
    let per_axis = dim / 2;
    let nfreq = per_axis / 2;
    let mut data = Vec::with_capacity(h * w * dim);
    for y in 0..h {
        for x in 0..w {
            for (pos, extent) in [(y, h), (x, w)] {
                let p = (pos as f64 + 0.5) / extent as f64;
                for f in 0..nfreq {
                    let freq = std::f64::consts::PI * (1u64 << f) as f64;
                    data.push(S::c((p * freq).sin()));
                    data.push(S::c((p * freq).cos()));
                }
            }
            for _ in 4 * nfreq..dim {
                data.push(S::zero());
            }
        }
    }
    Tensor::new(&[h * w, dim], data).expect("positional encoding shape")
}
