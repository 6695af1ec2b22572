//! Execution stage: render a layout into an image.
//!
//! Every synthesis layer modulates its features with a per-pixel mixture of
//! style latents. The mixture weights are the layout's assignment `A`
//! (average-pooled to the layer resolution), optionally refined by a
//! sigmoidal gate and renormalized per pixel.

use serde::{Deserialize, Serialize};

use crate::attention::{from_pixels, to_pixels, Modulation};
use crate::compositor::Layout;
use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv, Linear, MappingNet, ParamId, Params, LRELU_SLOPE};
use crate::planner::levels_for;
use crate::{Rng, Scalar, Tape, Tensor, Var};

/// Floor on the per-pixel normalizer after gating.
pub const GATE_FLOOR: f64 = 1e-8;

/// Inputs of the refinement gate `σ(g(S, X, W))`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Pixel side sees features and layout, segment side sees latent and class.
    #[default]
    Full,
    /// Segment latents only.
    Latents,
    /// Layout only.
    Layout,
    /// Image features only.
    Image,
    /// No gate: weights are the pooled assignment.
    Off,
}

impl GateMode {
    pub const ALL: [GateMode; 5] = [GateMode::Full, GateMode::Latents, GateMode::Layout, GateMode::Image, GateMode::Off];

    pub fn name(self) -> &'static str {
        match self {
            GateMode::Full => "full",
            GateMode::Latents => "latents",
            GateMode::Layout => "layout",
            GateMode::Image => "image",
            GateMode::Off => "off",
        }
    }
}

impl std::str::FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GateMode::ALL.into_iter().find(|g| g.name() == s).ok_or_else(|| Error::BadConfig(format!("unknown gate mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutorConfig {
    pub res: usize,
    pub classes: usize,
    pub max_segments: usize,
    /// Channel count at 4×4, 8×8, … up to `res`.
    pub channels: Vec<usize>,
    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_depth: usize,
    pub gate: GateMode,
    /// Width of the gate's pixel/segment projections.
    pub gate_dim: usize,
    /// Per-pixel noise injection with learned per-channel strength.
    pub noise: bool,
}

impl ExecutorConfig {
    pub fn validate(&self) -> Result<()> {
        let levels = levels_for(self.res)?;
        if self.channels.len() != levels {
            return Err(Error::BadConfig(format!("{} executor channel entries for {levels} resolutions", self.channels.len())));
        }
        if self.z_dim == 0 || self.w_dim == 0 || self.gate_dim == 0 || self.classes == 0 {
            return Err(Error::BadConfig("executor dimensions".into()));
        }
        Ok(())
    }

    /// Width of the style mapping input `[z ∥ mean d ∥ M]`.
    pub fn style_input_dim(&self) -> usize {
        self.z_dim + 1 + self.classes
    }
}

/// Style latents of a layout's segments, with the inputs they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleLatents<S> {
    /// `[k, d_w]`
    pub w: Tensor<S>,
    /// `[k, d_z]` raw style latents.
    pub z: Tensor<S>,
    /// `[k, d_z + 1 + C]` mapping inputs.
    pub inputs: Tensor<S>,
}

impl<S: Scalar> StyleLatents<S> {
    pub fn len(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
struct Gate {
    pix: Option<Linear>,
    pix_const: Option<ParamId>,
    seg: Linear,
    bias: ParamId,
    dim: usize,
}

#[derive(Clone, Debug)]
struct Level {
    conv: Conv,
    noise_strength: Option<ParamId>,
    modulation: Modulation,
    gate: Option<Gate>,
}

/// Per-layer record of an execution pass.
#[derive(Clone, Copy, Debug)]
pub struct LayerTrace<'t, S: Scalar> {
    /// `[n, k]` modulation weights.
    pub weights: Var<'t, S>,
    /// `[n, k]` gate activations, if a gate is active.
    pub gate: Option<Var<'t, S>>,
}

/// The execution network `G₂` with its style mapping `F₂`.
#[derive(Clone, Debug)]
pub struct Executor {
    cfg: ExecutorConfig,
    mapping: MappingNet,
    input: ParamId,
    levels: Vec<Level>,
    to_rgb: Conv,
}

impl Executor {
    pub fn new<S: Scalar>(params: &mut Params<S>, cfg: &ExecutorConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mapping = MappingNet::new(params, "executor.map", cfg.style_input_dim(), cfg.w_dim, cfg.mapping_depth, 0.01, rng).normalized();
        let input = params.add("executor.input", Tensor::randn(&[1, cfg.channels[0], 4, 4], 1.0, rng));
        let s_ch = cfg.classes + cfg.max_segments;
        let mut levels = Vec::new();
        let mut cin = cfg.channels[0];
        for (i, &c) in cfg.channels.iter().enumerate() {
            let name = format!("executor.l{i}");
            let conv = Conv::new(params, &format!("{name}.conv"), cin, c, 3, 1, rng);
            let noise_strength = cfg.noise.then(|| params.add(format!("{name}.noise"), Tensor::zeros(&[1, c, 1, 1])));
            let modulation = Modulation::new(params, &format!("{name}.mod"), cfg.w_dim, c, rng);
            let e = cfg.gate_dim;
            let (pix_in, seg_in) = match cfg.gate {
                GateMode::Full => (Some(c + s_ch), cfg.w_dim + cfg.classes),
                GateMode::Latents => (None, cfg.w_dim),
                GateMode::Layout => (Some(s_ch), cfg.classes),
                GateMode::Image => (Some(c), c),
                GateMode::Off => (None, 0),
            };
            let gate = (cfg.gate != GateMode::Off).then(|| Gate {
                pix: pix_in.map(|n| Linear::new(params, &format!("{name}.gate.pix"), n, e, Some(0.0), rng)),
                pix_const: pix_in.is_none().then(|| params.add(format!("{name}.gate.pix_const"), Tensor::randn(&[1, e], 1.0, rng))),
                seg: Linear::new(params, &format!("{name}.gate.seg"), seg_in, e, Some(0.0), rng),
                bias: params.add(format!("{name}.gate.bias"), Tensor::zeros(&[1])),
                dim: e,
            });
            levels.push(Level { conv, noise_strength, modulation, gate });
            cin = c;
        }
        let to_rgb = Conv::new(params, "executor.to_rgb", cin, 3, 1, 1, rng);
        Ok(Self { cfg: cfg.clone(), mapping, input, levels, to_rgb })
    }

    pub fn config(&self) -> &ExecutorConfig {
        &self.cfg
    }

    /// Gate projections `(pixel, segment)` of level `l`, if that level is gated.
    pub fn gate_layers(&self, l: usize) -> Option<(Option<&Linear>, &Linear, ParamId)> {
        self.levels.get(l)?.gate.as_ref().map(|g| (g.pix.as_ref(), &g.seg, g.bias))
    }

    pub fn levels(&self) -> usize {
        self.levels.len()
    }

    /// `F₂([z ∥ mean d ∥ M])` on tape values: `z: [k, d_z]`, `mean_d: [k, 1]`, `m: [k, C]`.
    pub fn map_vars<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        params: &Params<S>,
        z: Var<'t, S>,
        mean_d: Var<'t, S>,
        m: Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let k = z.shape()[0];
        if z.shape() != [k, self.cfg.z_dim] || mean_d.shape() != [k, 1] || m.shape() != [k, self.cfg.classes] {
            return Err(shape_err("map_style_latents", format!("z {:?}, d {:?}, M {:?}", z.shape(), mean_d.shape(), m.shape())));
        }
        self.mapping.forward(tape, params, tape.concat(&[z, mean_d, m], 1)?)
    }

    /// Style latents for every segment of `layout` from `z: [k, d_z]`.
    pub fn map_style_latents<S: Scalar>(&self, params: &Params<S>, layout: &Layout<S>, z: &Tensor<S>) -> Result<StyleLatents<S>> {
        let k = layout.len();
        if z.rank() != 2 || z.shape()[0] != k {
            return Err(Error::CountMismatch { expected: k, got: if z.rank() == 2 { z.shape()[0] } else { 0 } });
        }
        let tape = Tape::inference();
        let mean_d = Tensor::from_f64(&[k, 1], &layout.segments.iter().map(|s| s.mean_depth()).collect::<Vec<_>>())?;
        let m = Tensor::stack(&layout.segments.iter().map(|s| s.m.clone()).collect::<Vec<_>>())?;
        let (zv, dv, mv) = (tape.constant(z.clone()), tape.constant(mean_d), tape.constant(m));
        let w = self.map_vars(&tape, params, zv, dv, mv)?.value();
        let inputs = tape.concat(&[zv, dv, mv], 1)?.value();
        Ok(StyleLatents { w, z: z.clone(), inputs })
    }

    /// Mixture weights `[n, k]` for one layer: pooled assignment, optionally
    /// gated and renormalized.
    #[allow(clippy::too_many_arguments)]
    fn weights<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        params: &Params<S>,
        level: &Level,
        a_pix: Var<'t, S>,
        s_pix: Var<'t, S>,
        x_pix: Var<'t, S>,
        w: Var<'t, S>,
        m: Var<'t, S>,
    ) -> Result<(Var<'t, S>, Option<Var<'t, S>>)> {
        let Some(gate) = &level.gate else { return Ok((a_pix, None)) };
        let pix = match self.cfg.gate {
            GateMode::Full => Some(tape.concat(&[x_pix, s_pix], 1)?),
            GateMode::Layout => Some(s_pix),
            GateMode::Image => Some(x_pix),
            _ => None,
        };
        let phi = match (pix, &gate.pix, gate.pix_const) {
            (Some(v), Some(lin), _) => lin.forward(tape, params, v)?,
            (None, None, Some(c)) => tape.param(params, c),
            _ => return Err(shape_err("gate", "inconsistent gate inputs")),
        };
        let seg_in = match self.cfg.gate {
            GateMode::Full => tape.concat(&[w, m], 1)?,
            GateMode::Latents => w,
            GateMode::Layout => m,
            _ => {
                // Segment-pooled image features.
                let mass = a_pix.sum_axis(0)?.clamp_min(GATE_FLOOR)?;
                a_pix.t()?.matmul(x_pix)?.div(mass.t()?)?
            }
        };
        let psi = gate.seg.forward(tape, params, seg_in)?;
        let logits = phi.matmul_t(psi)?.scale(1.0 / (gate.dim as f64).sqrt())?.add(tape.param(params, gate.bias))?;
        let g = logits.sigmoid()?;
        let num = a_pix.mul(g)?;
        let weights = num.div(num.sum_axis(1)?.clamp_min(GATE_FLOOR)?)?;
        Ok((weights, Some(g)))
    }

    /// Renders `[1, 3, R, R]` in `[−1, 1]` from assignment `a: [k, R, R]`,
    /// layout tensor `s: [C + K, R, R]`, classes `m: [k, C]` and style
    /// latents `w: [k, d_w]`. `noise` seeds the per-layer noise maps.
    #[allow(clippy::too_many_arguments)]
    pub fn execute_vars<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        params: &Params<S>,
        a: Var<'t, S>,
        s: Var<'t, S>,
        m: Var<'t, S>,
        w: Var<'t, S>,
        noise: &Rng,
    ) -> Result<(Var<'t, S>, Vec<LayerTrace<'t, S>>)> {
        let r = self.cfg.res;
        let k = a.shape()[0];
        let s_ch = self.cfg.classes + self.cfg.max_segments;
        if a.shape() != [k, r, r] || s.shape() != [s_ch, r, r] || m.shape() != [k, self.cfg.classes] || w.shape() != [k, self.cfg.w_dim] {
            return Err(shape_err(
                "execute",
                format!("A {:?}, S {:?}, M {:?}, W {:?}", a.shape(), s.shape(), m.shape(), w.shape()),
            ));
        }
        let mut x = tape.param(params, self.input);
        let mut trace = Vec::with_capacity(self.levels.len());
        for (i, level) in self.levels.iter().enumerate() {
            let res = 4 << i;
            let n = res * res;
            if i > 0 {
                x = x.upsample_nearest(2)?;
            }
            x = level.conv.forward(tape, params, x)?;
            if let Some(strength) = level.noise_strength {
                let map = Tensor::new(&[1, 1, res, res], noise.fork_idx("noise", i as u64).normal_vec(n, 1.0))?;
                x = x.add(tape.constant(map).mul(tape.param(params, strength))?)?;
            }
            x = x.leaky_relu(LRELU_SLOPE)?;
            let pool = |v: Var<'t, S>| if res == r { Ok(v) } else { v.avg_pool(r / res) };
            let a_pix = pool(a)?.reshape(&[k, n])?.t()?;
            let s_pix = if self.cfg.gate == GateMode::Full || self.cfg.gate == GateMode::Layout {
                pool(s)?.reshape(&[s_ch, n])?.t()?
            } else {
                a_pix
            };
            let x_pix = to_pixels(x)?;
            let (weights, gate) = self.weights(tape, params, level, a_pix, s_pix, x_pix, w, m)?;
            let attended = weights.matmul(w)?;
            x = from_pixels(level.modulation.forward(tape, params, x_pix, attended)?, (res, res))?;
            trace.push(LayerTrace { weights, gate });
        }
        let img = self.to_rgb.forward(tape, params, x)?.tanh()?;
        Ok((img, trace))
    }

    /// Renders `layout` with `style` into a `[3, R, R]` image.
    pub fn execute<S: Scalar>(&self, params: &Params<S>, layout: &Layout<S>, style: &StyleLatents<S>, noise: &Rng) -> Result<Tensor<S>> {
        if style.len() != layout.len() {
            return Err(Error::CountMismatch { expected: layout.len(), got: style.len() });
        }
        let tape = Tape::inference();
        let m = Tensor::stack(&layout.segments.iter().map(|s| s.m.clone()).collect::<Vec<_>>())?;
        let (img, _) = self.execute_vars(
            &tape,
            params,
            tape.constant(layout.a.clone()),
            tape.constant(layout.tensor()),
            tape.constant(m),
            tape.constant(style.w.clone()),
            noise,
        )?;
        let r = self.cfg.res;
        img.value().into_reshape(&[3, r, r])
    }

    /// Per-layer modulation weights for `layout` (inspection and tests).
    pub fn modulation_weights<S: Scalar>(
        &self,
        params: &Params<S>,
        layout: &Layout<S>,
        style: &StyleLatents<S>,
        noise: &Rng,
    ) -> Result<Vec<Tensor<S>>> {
        let tape = Tape::inference();
        let m = Tensor::stack(&layout.segments.iter().map(|s| s.m.clone()).collect::<Vec<_>>())?;
        let (_, trace) = self.execute_vars(
            &tape,
            params,
            tape.constant(layout.a.clone()),
            tape.constant(layout.tensor()),
            tape.constant(m),
            tape.constant(style.w.clone()),
            noise,
        )?;
        Ok(trace.iter().map(|t| t.weights.value()).collect())
    }
}
