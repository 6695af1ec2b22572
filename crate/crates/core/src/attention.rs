//! Bipartite attention between a feature grid and a small set of latents,
//! and the region-wise modulation it drives.
//!
//! Features are handled pixel-major as `[n, c]` with `n = h·w`; latents as
//! `[k, d_w]`. The same parameters serve any `k`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::nn::{positional_encoding, Linear, ParamId, Params};
use crate::{Rng, Scalar, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Channels of the modulated features.
    pub channels: usize,
    /// Extra per-pixel channels concatenated into the query input only.
    pub cond_channels: usize,
    pub latent_dim: usize,
    /// Attention dimension `d`.
    pub dim: usize,
    pub heads: usize,
    /// Width of the sinusoidal positional encoding fed to the query map (0 = none).
    pub pos_dim: usize,
    /// Learned per-slot key offsets for up to this many latents (0 = off).
    pub slots: usize,
}

/// Per-pixel gain and bias computed from an attended latent mixture.
#[derive(Clone, Debug)]
pub struct Modulation {
    gamma: Linear,
    beta: Linear,
}

impl Modulation {
    pub fn new<S: Scalar>(params: &mut Params<S>, name: &str, in_dim: usize, channels: usize, rng: &mut Rng) -> Self {
        Self {
            gamma: Linear::new(params, &format!("{name}.gamma"), in_dim, channels, Some(1.0), rng),
            beta: Linear::new(params, &format!("{name}.beta"), in_dim, channels, Some(0.0), rng),
        }
    }

    pub fn gamma(&self) -> &Linear {
        &self.gamma
    }

    pub fn beta(&self) -> &Linear {
        &self.beta
    }

    /// `γ(attended) ⊙ LayerNorm(x) + β(attended)` over `[n, c]` features.
    pub fn forward<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        params: &Params<S>,
        x: Var<'t, S>,
        attended: Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let (xs, as_) = (x.shape(), attended.shape());
        if xs.len() != 2 || as_.len() != 2 || xs[0] != as_[0] {
            return Err(shape_err("modulate", format!("features {xs:?} vs attended {as_:?}")));
        }
        let g = self.gamma.forward(tape, params, attended)?;
        let b = self.beta.forward(tape, params, attended)?;
        g.mul(x.layernorm(1, LN_EPS)?)?.add(b)
    }
}

/// Output of [`AttentionBlock::attend`].
#[derive(Clone, Copy, Debug)]
pub struct Attention<'t, S: Scalar> {
    /// Head-averaged pre-softmax scores `[n, k]`.
    pub scores: Var<'t, S>,
    /// Head-averaged attention distribution `[n, k]`; rows sum to 1.
    pub weights: Var<'t, S>,
    /// `[n, d]` mixture of value vectors.
    pub attended: Var<'t, S>,
}

/// Key-value attention from pixels to latents followed by [`Modulation`].
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    cfg: AttentionConfig,
    q: Linear,
    k: Linear,
    v: Linear,
    slots: Option<ParamId>,
    modulation: Modulation,
}

impl AttentionBlock {
    pub fn new<S: Scalar>(params: &mut Params<S>, name: &str, cfg: &AttentionConfig, rng: &mut Rng) -> Self {
        assert!(cfg.heads >= 1 && cfg.dim % cfg.heads == 0, "attention dim must split evenly into heads");
        let q_in = cfg.channels + cfg.cond_channels + cfg.pos_dim;
        let q = Linear::new(params, &format!("{name}.q"), q_in, cfg.dim, Some(0.0), rng);
        let k = Linear::new(params, &format!("{name}.k"), cfg.latent_dim, cfg.dim, Some(0.0), rng);
        let v = Linear::new(params, &format!("{name}.v"), cfg.latent_dim, cfg.dim, Some(0.0), rng);
        let slots = (cfg.slots > 0).then(|| params.add(format!("{name}.slots"), Tensor::randn(&[cfg.slots, cfg.dim], 0.1, rng)));
        let modulation = Modulation::new(params, &format!("{name}.mod"), cfg.dim, cfg.channels, rng);
        Self { cfg: cfg.clone(), q, k, v, slots, modulation }
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.cfg
    }

    pub fn query(&self) -> &Linear {
        &self.q
    }

    pub fn key(&self) -> &Linear {
        &self.k
    }

    pub fn value(&self) -> &Linear {
        &self.v
    }

    pub fn modulation(&self) -> &Modulation {
        &self.modulation
    }

    /// `softmax(q(X)·k(W)ᵀ/√d)·v(W)` for features `x: [n, c]` on an
    /// `h×w` grid, optional query-only conditioning `cond: [n, e]`, and
    /// latents `w: [k, d_w]`.
    #[allow(clippy::too_many_arguments)]
    pub fn attend<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        params: &Params<S>,
        x: Var<'t, S>,
        cond: Option<Var<'t, S>>,
        grid: (usize, usize),
        w: Var<'t, S>,
    ) -> Result<Attention<'t, S>> {
        let c = &self.cfg;
        let (xs, ws) = (x.shape(), w.shape());
        let n = grid.0 * grid.1;
        if xs != [n, c.channels] || ws.len() != 2 || ws[1] != c.latent_dim || ws[0] == 0 {
            return Err(shape_err("attend", format!("features {xs:?} on {grid:?}, latents {ws:?}")));
        }
        let k = ws[0];
        let mut parts = vec![x];
        match (cond, c.cond_channels) {
            (Some(cv), e) if cv.shape() == [n, e] && e > 0 => parts.push(cv),
            (None, 0) => {}
            (cv, e) => {
                return Err(shape_err("attend", format!("conditioning {:?} for {e} channels", cv.map(|v| v.shape()))));
            }
        }
        if c.pos_dim > 0 {
            parts.push(tape.constant(positional_encoding(grid.0, grid.1, c.pos_dim)));
        }
        let q_in = if parts.len() == 1 { x } else { tape.concat(&parts, 1)? };
        let q = self.q.forward(tape, params, q_in)?;
        let mut key = self.k.forward(tape, params, w)?;
        if let Some(slots) = self.slots {
            if k > c.slots {
                return Err(shape_err("attend", format!("{k} latents exceed {} slots", c.slots)));
            }
            key = key.add(tape.param(params, slots).narrow(0, 0, k)?)?;
        }
        let v = self.v.forward(tape, params, w)?;
        let (h, dh) = (c.heads, c.dim / c.heads);
        let split = |t: Var<'t, S>, rows: usize| t.reshape(&[rows, h, dh])?.permute(&[1, 0, 2]);
        let scores = split(q, n)?.matmul_t(split(key, k)?)?.scale(1.0 / (dh as f64).sqrt())?;
        let probs = scores.softmax(2)?;
        let attended = probs.matmul(split(v, k)?)?.permute(&[1, 0, 2])?.reshape(&[n, c.dim])?;
        let (scores, weights) = if h == 1 {
            (scores.reshape(&[n, k])?, probs.reshape(&[n, k])?)
        } else {
            (scores.mean_axis(0)?.reshape(&[n, k])?, probs.mean_axis(0)?.reshape(&[n, k])?)
        };
        Ok(Attention { scores, weights, attended })
    }

    /// Attention followed by modulation of `x`; returns the new features and
    /// the attention record.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        params: &Params<S>,
        x: Var<'t, S>,
        cond: Option<Var<'t, S>>,
        grid: (usize, usize),
        w: Var<'t, S>,
    ) -> Result<(Var<'t, S>, Attention<'t, S>)> {
        let att = self.attend(tape, params, x, cond, grid, w)?;
        let y = self.modulation.forward(tape, params, x, att.attended)?;
        Ok((y, att))
    }
}

/// `[1, C, H, W]` feature map to pixel-major `[H·W, C]`.
pub fn to_pixels<'t, S: Scalar>(x: Var<'t, S>) -> Result<Var<'t, S>> {
    let s = x.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(shape_err("to_pixels", format!("{s:?}")));
    }
    x.reshape(&[s[1], s[2] * s[3]])?.t()
}

/// Pixel-major `[H·W, C]` back to a `[1, C, H, W]` feature map.
pub fn from_pixels<'t, S: Scalar>(x: Var<'t, S>, grid: (usize, usize)) -> Result<Var<'t, S>> {
    let s = x.shape();
    if s.len() != 2 || s[0] != grid.0 * grid.1 {
        return Err(shape_err("from_pixels", format!("{s:?} on {grid:?}")));
    }
    x.t()?.reshape(&[1, s[1], grid.0, grid.1])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(heads: usize) -> AttentionConfig {
        AttentionConfig { channels: 3, cond_channels: 0, latent_dim: 4, dim: 4, heads, pos_dim: 4, slots: 0 }
    }

    #[test]
    fn weights_are_row_stochastic_for_any_k() {
        let mut rng = Rng::new(3);
        let mut p = Params::<f32>::new();
        for heads in [1, 2] {
            let block = AttentionBlock::new(&mut p, &format!("a{heads}"), &cfg(heads), &mut rng);
            for k in [1, 3, 8] {
                let tape = Tape::new();
                let x = tape.constant(Tensor::randn(&[16, 3], 1.0, &mut rng));
                let w = tape.constant(Tensor::randn(&[k, 4], 1.0, &mut rng));
                let (y, att) = block.forward(&tape, &p, x, None, (4, 4), w).unwrap();
                assert_eq!(y.shape(), vec![16, 3]);
                for row in att.weights.value().data().chunks(k) {
                    assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn pixel_layout_round_trip() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 2, 2, 3], |i| i as f64));
        let px = to_pixels(x).unwrap();
        assert_eq!(px.value().at(&[4, 1]), 10.0);
        assert!(from_pixels(px, (2, 3)).unwrap().value().bit_eq(&x.value()));
    }
}
