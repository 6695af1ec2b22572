//! Planning stage: recurrent, variable-count generation of object segments.
//!
//! At step `t` a small transformer-GAN turns `k_t` structure latents into
//! `k_t` segments. Its queries see the class map of the layout built so far,
//! so new objects are placed in the context of earlier ones. Each latent's
//! attention column in the final block supplies its segment's spatial
//! logits; class and depth heads read features pooled under that shape.

use serde::{Deserialize, Serialize};

use crate::attention::{from_pixels, to_pixels, Attention, AttentionBlock, AttentionConfig};
use crate::compositor::{composite, composite_vars, Layout, LayoutKind, SegmentDraft};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv, Linear, MappingNet, ParamId, Params, LRELU_SLOPE};
use crate::{Rng, Scalar, Tape, Tensor, Var};

/// Normal distribution over per-step segment counts, rounded and clamped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountDistribution {
    pub mu: f64,
    pub sigma: f64,
    pub k_min: usize,
    pub k_max: usize,
}

impl CountDistribution {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.mu.is_finite() || self.k_min > self.k_max {
            return Err(Error::BadConfig(format!("invalid count distribution {self:?}")));
        }
        Ok(())
    }

    /// Maximum-likelihood fit to per-step counts `n / steps` of real layouts.
    pub fn fit(segment_counts: &[usize], steps: usize, k_min: usize, k_max: usize) -> Result<Self> {
        if segment_counts.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let steps = steps.max(1) as f64;
        let xs: Vec<f64> = segment_counts.iter().map(|&n| n as f64 / steps).collect();
        let mu = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / xs.len() as f64;
        Ok(Self { mu, sigma: var.sqrt(), k_min, k_max })
    }
}

/// `clamp(round(μ + σ·ε), k_min, k_max)` with `ε ~ 𝒩(0, 1)`.
pub fn sample_segment_count(dist: &CountDistribution, rng: &mut Rng) -> usize {
    let x = (dist.mu + dist.sigma * rng.normal()).round();
    let x = if x.is_finite() { x.max(0.0) as usize } else { dist.k_min };
    x.clamp(dist.k_min, dist.k_max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub res: usize,
    pub classes: usize,
    /// Recurrent steps; 0 selects the non-compositional dense mode.
    pub steps: usize,
    /// Channel count at 4×4, 8×8, … up to `res`.
    pub channels: Vec<usize>,
    pub z_dim: usize,
    pub u_dim: usize,
    pub mapping_depth: usize,
    pub attn_dim: usize,
    pub heads: usize,
    pub pos_dim: usize,
    /// Width of the pixel/latent projections in the depth head.
    pub depth_dim: usize,
    /// Learned latent slot offsets (0 = off).
    pub slots: usize,
    /// Layout capacity: channels of the instance map.
    pub max_segments: usize,
    pub count: CountDistribution,
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        let levels = levels_for(self.res)?;
        if self.channels.len() != levels {
            return Err(Error::BadConfig(format!("{} planner channel entries for {levels} resolutions", self.channels.len())));
        }
        if self.classes < 1 || self.z_dim < 1 || self.u_dim < 1 || self.attn_dim % self.heads.max(1) != 0 {
            return Err(Error::BadConfig("planner dimensions".into()));
        }
        if self.pos_dim % 4 != 0 {
            return Err(Error::BadConfig(format!("positional width {} must be a multiple of 4", self.pos_dim)));
        }
        if self.max_segments < 1 || (self.steps > 0 && self.count.k_min == 0 && self.count.k_max == 0) {
            return Err(Error::BadConfig("planner segment capacity".into()));
        }
        self.count.validate()
    }
}

/// Number of synthesis resolutions from 4×4 to `res` (a power of two ≥ 4).
pub fn levels_for(res: usize) -> Result<usize> {
    if res < 4 || !res.is_power_of_two() {
        return Err(Error::BadConfig(format!("resolution {res} must be a power of two ≥ 4")));
    }
    Ok(res.trailing_zeros() as usize - 1)
}

#[derive(Clone, Debug)]
struct Level {
    conv: Conv,
    attn: AttentionBlock,
}

/// Segments emitted by one planning step, as tape values.
#[derive(Clone, Copy, Debug)]
pub struct StepVars<'t, S: Scalar> {
    /// `[k, H, W]`
    pub p: Var<'t, S>,
    /// `[k, C]`
    pub m: Var<'t, S>,
    /// `[k, H, W]`
    pub d: Var<'t, S>,
    /// Final-block attention.
    pub attention: Attention<'t, S>,
}

/// A full planned scene as tape values.
#[derive(Clone, Debug)]
pub struct PlanVars<'t, S: Scalar> {
    /// `[k, H, W]`, `[k, C]`, `[k, H, W]` over all segments (absent in dense mode).
    pub segments: Option<(Var<'t, S>, Var<'t, S>, Var<'t, S>)>,
    /// `[C, H, W]`
    pub class_map: Var<'t, S>,
    /// `[k, H, W]`
    pub a: Var<'t, S>,
    /// `[H, W]`
    pub depth_map: Var<'t, S>,
    pub z: Vec<Tensor<S>>,
    pub u: Vec<Tensor<S>>,
    pub births: Vec<usize>,
}

impl<'t, S: Scalar> PlanVars<'t, S> {
    /// `class_map ∥ A` zero-padded to `max_segments`, `[C + max_segments, H, W]`.
    pub fn layout_tensor(&self, tape: &'t Tape<S>, max_segments: usize) -> Result<Var<'t, S>> {
        let s = self.a.shape();
        if s[0] > max_segments {
            return Err(Error::CountMismatch { expected: max_segments, got: s[0] });
        }
        let mut parts = vec![self.class_map, self.a];
        if s[0] < max_segments {
            parts.push(tape.constant(Tensor::zeros(&[max_segments - s[0], s[1], s[2]])));
        }
        tape.concat(&parts, 0)
    }

    /// Detached values as a [`Layout`].
    pub fn to_layout(&self, max_segments: usize) -> Result<Layout<S>> {
        let res = self.depth_map.shape()[0];
        let Some((p, m, d)) = self.segments else {
            let cm = self.class_map.value();
            let classes = cm.shape()[0];
            let n = (res * res) as f64;
            let mean: Vec<f64> = cm.data().chunks(res * res).map(|c| c.iter().map(|v| v.f64()).sum::<f64>() / n).collect();
            let seg = SegmentDraft {
                p: Tensor::full(&[res, res], S::c(1.0 / n)),
                m: Tensor::from_f64(&[classes], &mean)?,
                d: Tensor::zeros(&[res, res]),
                z: self.z[0].clone(),
                u: self.u[0].clone(),
                birth_step: 0,
            };
            return Ok(Layout {
                kind: LayoutKind::Dense,
                segments: vec![seg],
                a: Tensor::ones(&[1, res, res]),
                class_map: cm,
                depth_map: Tensor::zeros(&[res, res]),
                k_max: max_segments,
            });
        };
        let (p, m, d) = (p.value(), m.value(), d.value());
        let segments = (0..self.births.len())
            .map(|i| SegmentDraft {
                p: p.index0(i),
                m: m.index0(i),
                d: d.index0(i),
                z: self.z[i].clone(),
                u: self.u[i].clone(),
                birth_step: self.births[i],
            })
            .collect();
        Ok(Layout {
            kind: LayoutKind::Composited,
            segments,
            a: self.a.value(),
            class_map: self.class_map.value(),
            depth_map: self.depth_map.value(),
            k_max: max_segments,
        })
    }
}

/// The planning network `G₁` with its structure mapping `F₁`.
#[derive(Clone, Debug)]
pub struct Planner {
    cfg: PlannerConfig,
    mapping: MappingNet,
    input: ParamId,
    levels: Vec<Level>,
    p_gain: ParamId,
    m_head: Linear,
    d_pix: Linear,
    d_lat: Linear,
    dense_head: Linear,
}

impl Planner {
    pub fn new<S: Scalar>(params: &mut Params<S>, cfg: &PlannerConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mapping = MappingNet::new(params, "planner.map", cfg.z_dim, cfg.u_dim, cfg.mapping_depth, 0.01, rng).normalized();
        let input = params.add("planner.input", Tensor::randn(&[1, cfg.channels[0], 4, 4], 1.0, rng));
        let mut levels = Vec::new();
        let mut cin = cfg.channels[0];
        for (i, &c) in cfg.channels.iter().enumerate() {
            let conv = Conv::new(params, &format!("planner.l{i}.conv"), cin, c, 3, 1, rng);
            let acfg = AttentionConfig {
                channels: c,
                cond_channels: cfg.classes,
                latent_dim: cfg.u_dim,
                dim: cfg.attn_dim,
                heads: cfg.heads,
                pos_dim: cfg.pos_dim,
                slots: cfg.slots,
            };
            let attn = AttentionBlock::new(params, &format!("planner.l{i}.attn"), &acfg, rng);
            levels.push(Level { conv, attn });
            cin = c;
        }
        let p_gain = params.add("planner.p_gain", Tensor::full(&[1], S::one()));
        let m_head = Linear::new(params, "planner.m_head", cin + cfg.u_dim, cfg.classes, Some(0.0), rng);
        let d_pix = Linear::new(params, "planner.d_pix", cin, cfg.depth_dim, Some(0.0), rng);
        let d_lat = Linear::new(params, "planner.d_lat", cfg.u_dim, cfg.depth_dim, Some(0.0), rng);
        let dense_head = Linear::new(params, "planner.dense", cin, cfg.classes, Some(0.0), rng);
        Ok(Self { cfg: cfg.clone(), mapping, input, levels, p_gain, m_head, d_pix, d_lat, dense_head })
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.cfg
    }

    /// Replaces the count distribution (it is fitted to data, not trained).
    pub fn set_count(&mut self, count: CountDistribution) -> Result<()> {
        count.validate()?;
        self.cfg.count = count;
        Ok(())
    }

    pub fn mapping(&self) -> &MappingNet {
        &self.mapping
    }

    /// `F₁` applied row-wise to `z: [k, d_z]`.
    pub fn map_vars<'t, S: Scalar>(&self, tape: &'t Tape<S>, params: &Params<S>, z: Var<'t, S>) -> Result<Var<'t, S>> {
        let s = z.shape();
        if s.len() != 2 || s[0] == 0 || s[1] != self.cfg.z_dim {
            return Err(shape_err("map_structure_latents", format!("{s:?}")));
        }
        self.mapping.forward(tape, params, z)
    }

    /// Synthesis stack: final pixel features `[n, c]` and final-block attention.
    fn synthesize<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        params: &Params<S>,
        u: Var<'t, S>,
        prev: Var<'t, S>,
    ) -> Result<(Var<'t, S>, Attention<'t, S>)> {
        let r = self.cfg.res;
        let mut x = tape.param(params, self.input);
        let mut last = None;
        for (i, level) in self.levels.iter().enumerate() {
            let res = 4 << i;
            if i > 0 {
                x = x.upsample_nearest(2)?;
            }
            x = level.conv.forward(tape, params, x)?.leaky_relu(LRELU_SLOPE)?;
            let cond = if res == r { prev } else { prev.avg_pool(r / res)? };
            let cond = cond.reshape(&[self.cfg.classes, res * res])?.t()?;
            let (y, att) = level.attn.forward(tape, params, to_pixels(x)?, Some(cond), (res, res), u)?;
            x = from_pixels(y, (res, res))?;
            last = Some((y, att));
        }
        last.ok_or_else(|| shape_err("planner", "no synthesis levels"))
    }

    /// One recurrent step: `k` new segments from structure latents `u: [k, d_u]`
    /// given the previous class map `prev: [C, H, W]`.
    pub fn step_vars<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        params: &Params<S>,
        u: Var<'t, S>,
        prev: Var<'t, S>,
    ) -> Result<StepVars<'t, S>> {
        let (r, c) = (self.cfg.res, self.cfg.classes);
        if prev.shape() != [c, r, r] {
            return Err(shape_err("plan_step", format!("previous class map {:?}", prev.shape())));
        }
        let k = u.shape()[0];
        let (x, att) = self.synthesize(tape, params, u, prev)?;
        let gain = tape.param(params, self.p_gain);
        let p = att.scores.t()?.mul(gain)?.softmax(1)?;
        let pooled = p.matmul(x)?;
        let m = self.m_head.forward(tape, params, tape.concat(&[pooled, u], 1)?)?.softmax(1)?;
        let dp = self.d_pix.forward(tape, params, x)?;
        let dl = self.d_lat.forward(tape, params, u)?;
        let d = dl.matmul_t(dp)?.scale(1.0 / (self.cfg.depth_dim as f64).sqrt())?;
        Ok(StepVars { p: p.reshape(&[k, r, r])?, m, d: d.reshape(&[k, r, r])?, attention: att })
    }

    /// Dense class map `[C, H, W]` from a single latent (non-compositional mode).
    pub fn dense_vars<'t, S: Scalar>(&self, tape: &'t Tape<S>, params: &Params<S>, u: Var<'t, S>) -> Result<Var<'t, S>> {
        let (r, c) = (self.cfg.res, self.cfg.classes);
        let prev = tape.constant(Tensor::zeros(&[c, r, r]));
        let (x, _) = self.synthesize(tape, params, u, prev)?;
        self.dense_head.forward(tape, params, x)?.softmax(1)?.t()?.reshape(&[c, r, r])
    }

    /// Plans a whole scene on `tape`: `T` recurrent steps, each conditioned
    /// on the composite of everything planned before it.
    pub fn plan_vars<'t, S: Scalar>(&self, tape: &'t Tape<S>, params: &Params<S>, rng: &Rng) -> Result<PlanVars<'t, S>> {
        let (r, c, cfg) = (self.cfg.res, self.cfg.classes, &self.cfg);
        if cfg.steps == 0 {
            let z = Tensor::new(&[1, cfg.z_dim], rng.fork("z").normal_vec(cfg.z_dim, 1.0))?;
            let u = self.map_vars(tape, params, tape.constant(z.clone()))?;
            let class_map = self.dense_vars(tape, params, u)?;
            return Ok(PlanVars {
                segments: None,
                class_map,
                a: tape.constant(Tensor::ones(&[1, r, r])),
                depth_map: tape.constant(Tensor::zeros(&[r, r])),
                z: vec![z.into_reshape(&[cfg.z_dim])?],
                u: vec![u.value().into_reshape(&[cfg.u_dim])?],
                births: vec![0],
            });
        }
        let mut prev = tape.constant(Tensor::zeros(&[c, r, r]));
        let (mut ps, mut ms, mut ds) = (Vec::new(), Vec::new(), Vec::new());
        let (mut zs, mut us, mut births) = (Vec::new(), Vec::new(), Vec::new());
        let mut composite = None;
        for t in 1..=cfg.steps {
            let room = cfg.max_segments - births.len();
            let k = sample_segment_count(&cfg.count, &mut rng.fork_idx("count", t as u64)).min(room);
            if k == 0 {
                continue;
            }
            let z = Tensor::new(&[k, cfg.z_dim], rng.fork_idx("z", t as u64).normal_vec(k * cfg.z_dim, 1.0))?;
            let u = self.map_vars(tape, params, tape.constant(z.clone()))?;
            let step = self.step_vars(tape, params, u, prev)?;
            let uv = u.value();
            for i in 0..k {
                zs.push(z.index0(i));
                us.push(uv.index0(i));
                births.push(t);
            }
            ps.push(step.p);
            ms.push(step.m);
            ds.push(step.d);
            let cat = |v: &[Var<'t, S>]| if v.len() == 1 { Ok(v[0]) } else { tape.concat(v, 0) };
            let (p, m, d) = (cat(&ps)?, cat(&ms)?, cat(&ds)?);
            let out = composite_vars(p, d, m)?;
            prev = out.class_map;
            composite = Some(((p, m, d), out));
        }
        let (segments, out) = composite.ok_or(Error::EmptyScene)?;
        Ok(PlanVars {
            segments: Some(segments),
            class_map: out.class_map,
            a: out.a,
            depth_map: out.depth_map,
            z: zs,
            u: us,
            births,
        })
    }

    /// Plans a scene without gradient tracking.
    pub fn plan_scene<S: Scalar>(&self, params: &Params<S>, rng: &Rng) -> Result<Layout<S>> {
        let tape = Tape::inference();
        self.plan_vars(&tape, params, rng)?.to_layout(self.cfg.max_segments)
    }

    /// `F₁` on plain tensors.
    pub fn map_structure_latents<S: Scalar>(&self, params: &Params<S>, z: &Tensor<S>) -> Result<Tensor<S>> {
        let tape = Tape::inference();
        Ok(self.map_vars(&tape, params, tape.constant(z.clone()))?.value())
    }

    /// One planning step on plain tensors; `prev` may be empty.
    pub fn plan_step<S: Scalar>(
        &self,
        params: &Params<S>,
        z: &Tensor<S>,
        prev: Option<&Layout<S>>,
        birth_step: usize,
    ) -> Result<Vec<SegmentDraft<S>>> {
        let (r, c) = (self.cfg.res, self.cfg.classes);
        let tape = Tape::inference();
        let u = self.map_vars(&tape, params, tape.constant(z.clone()))?;
        let prev = tape.constant(match prev {
            Some(l) => l.class_map.clone(),
            None => Tensor::zeros(&[c, r, r]),
        });
        let step = self.step_vars(&tape, params, u, prev)?;
        let (p, m, d, uv) = (step.p.value(), step.m.value(), step.d.value(), u.value());
        Ok((0..z.shape()[0])
            .map(|i| SegmentDraft { p: p.index0(i), m: m.index0(i), d: d.index0(i), z: z.index0(i), u: uv.index0(i), birth_step })
            .collect())
    }

    /// Re-plans segment `i` from latent `z_new` conditioned on all other
    /// segments; every other draft is carried over untouched. A latent equal
    /// to the stored one returns the layout unchanged.
    pub fn regenerate_segment<S: Scalar>(&self, params: &Params<S>, layout: &Layout<S>, i: usize, z_new: &Tensor<S>) -> Result<Layout<S>> {
        if i >= layout.len() {
            return Err(Error::IndexOutOfRange { index: i, len: layout.len() });
        }
        if z_new.numel() != self.cfg.z_dim {
            return Err(shape_err("regenerate_segment", format!("latent of {} values", z_new.numel())));
        }
        let old = &layout.segments[i];
        if old.z.bit_eq(z_new) {
            return Ok(layout.clone());
        }
        let z = z_new.reshape(&[1, self.cfg.z_dim])?;
        if layout.kind == LayoutKind::Dense {
            let tape = Tape::inference();
            let u = self.map_vars(&tape, params, tape.constant(z.clone()))?;
            let cm = self.dense_vars(&tape, params, u)?;
            let plan = PlanVars {
                segments: None,
                class_map: cm,
                a: tape.constant(layout.a.clone()),
                depth_map: tape.constant(layout.depth_map.clone()),
                z: vec![z_new.clone()],
                u: vec![u.value().into_reshape(&[self.cfg.u_dim])?],
                births: vec![0],
            };
            return plan.to_layout(layout.k_max);
        }
        let rest = if layout.len() > 1 { Some(layout.without(i)?) } else { None };
        let mut fresh = self.plan_step(params, &z, rest.as_ref(), old.birth_step)?;
        let mut segments = layout.segments.clone();
        segments[i] = fresh.remove(0);
        composite(segments, layout.k_max)
    }

    /// Appends one planning step conditioned on the current layout.
    pub fn add_segments<S: Scalar>(&self, params: &Params<S>, layout: &Layout<S>, rng: &Rng) -> Result<Layout<S>> {
        if layout.kind == LayoutKind::Dense {
            return Err(Error::Unsupported("adding segments to a non-compositional layout".into()));
        }
        let room = layout.k_max.saturating_sub(layout.len());
        let k = sample_segment_count(&self.cfg.count, &mut rng.fork("count")).min(room);
        if k == 0 {
            return Err(Error::CountMismatch { expected: layout.k_max, got: layout.len() + 1 });
        }
        let z = Tensor::new(&[k, self.cfg.z_dim], rng.fork("z").normal_vec(k * self.cfg.z_dim, 1.0))?;
        let birth = layout.segments.iter().map(|s| s.birth_step).max().unwrap_or(0) + 1;
        let fresh = self.plan_step(params, &z, Some(layout), birth)?;
        let mut segments = layout.segments.clone();
        segments.extend(fresh);
        composite(segments, layout.k_max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn levels_cover_four_to_res() {
        assert_eq!(levels_for(4).unwrap(), 1);
        assert_eq!(levels_for(32).unwrap(), 4);
        assert!(levels_for(24).is_err());
    }

    #[test]
    fn count_rounding_and_clamp() {
        let mut rng = Rng::new(0);
        let d = CountDistribution { mu: 2.4, sigma: 0.0, k_min: 1, k_max: 5 };
        assert_eq!(sample_segment_count(&d, &mut rng), 2);
        let d = CountDistribution { mu: -5.0, sigma: 0.0, k_min: 1, k_max: 5 };
        assert_eq!(sample_segment_count(&d, &mut rng), 1);
    }

    #[test]
    fn count_fit_is_per_step() {
        let d = CountDistribution::fit(&[2, 4, 4, 6], 2, 1, 5).unwrap();
        assert!((d.mu - 2.0).abs() < 1e-12);
        assert!((d.sigma - 0.5f64.sqrt()).abs() < 1e-12);
    }
}
