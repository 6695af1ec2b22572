//! Shared test oracles: central finite differences and small brute-force helpers.
#![allow(dead_code, unused_macros, unused_imports)]

use gf2_core::nn::Params;
use gf2_core::{Result, Rng, Scalar, Tape, Tensor, Var};

/// Coordinates probed per tensor; tensors smaller than this are probed fully.
pub const MAX_COORDS: usize = 24;

/// A differentiable computation that can be evaluated at any precision.
pub trait Probe {
    fn eval<'t, S: Scalar>(&self, tape: &'t Tape<S>, params: &Params<S>, v: &[Var<'t, S>]) -> Result<Var<'t, S>>;
}

/// Builds a [`Probe`] from a body, capturing the listed values by clone.
///
/// `probe!(stride: usize = 2; |tape, params, v| v[0].conv2d(v[1], stride, 1))`
macro_rules! probe {
    ($($cap:ident : $ty:ty = $val:expr),* ; |$tape:ident, $p:ident, $v:ident| $body:expr) => {{
        #[allow(non_camel_case_types, dead_code)]
        struct __Probe { $($cap: $ty),* }
        impl $crate::common::Probe for __Probe {
            #[allow(unused_variables, clippy::clone_on_copy)]
            fn eval<'t, S: gf2_core::Scalar>(
                &self,
                $tape: &'t gf2_core::Tape<S>,
                $p: &gf2_core::nn::Params<S>,
                $v: &[gf2_core::Var<'t, S>],
            ) -> gf2_core::Result<gf2_core::Var<'t, S>> {
                $(let $cap = self.$cap.clone();)*
                $body
            }
        }
        __Probe { $($cap: $val),* }
    }};
}
pub(crate) use probe;

#[derive(Debug)]
pub struct GradReport {
    /// `(label, relative error)` per checked tensor.
    pub entries: Vec<(String, f64)>,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.1).fold(0.0, f64::max)
    }

    pub fn assert_below(&self, tol: f64) {
        for (name, err) in &self.entries {
            assert!(*err <= tol, "gradient of {name}: relative error {err:.3e} > {tol:.1e} ({self:?})");
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Gradient norm below which errors are judged absolutely: a structurally
/// zero gradient carries f32 rounding noise of order 1e-6.
pub const ABS_FLOOR: f64 = 1e-2;

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖, ABS_FLOOR)`.
pub fn rel_err(auto: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = auto.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(auto).max(norm(numeric)).max(ABS_FLOOR)
}

fn coords(n: usize, rng: &mut Rng) -> Vec<usize> {
    if n <= MAX_COORDS {
        (0..n).collect()
    } else {
        let mut v: Vec<usize> = (0..MAX_COORDS).map(|_| rng.below(n)).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Central difference at the largest step in `h, h/2, h/4, ..` whose
/// quotient agrees with the one at half that step, or `None` when no pair
/// agrees: a kink (e.g. a leaky-ReLU input crossing zero) then sits too close
/// for any finite difference to estimate the derivative.
fn smooth_difference(h: f64, mut f: impl FnMut(f64) -> f64) -> Option<f64> {
    let mut quotient = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    let mut wide = quotient(h);
    for i in 1..=HALVINGS {
        let narrow = quotient(h / f64::from(1 << i));
        let scale = wide.abs().max(narrow.abs()).max(ABS_FLOOR);
        if (wide - narrow).abs() <= KINK_TOL * scale {
            return Some(wide);
        }
        wide = narrow;
    }
    None
}

/// Relative disagreement between successive step sizes that marks a kink.
/// Smooth functions disagree by `O(h²)`, far below this.
pub const KINK_TOL: f64 = 1e-4;

/// Step halvings tried before giving up on a coordinate.
pub const HALVINGS: u32 = 10;

/// Largest fraction of all probed coordinates that may be excluded as kinks.
pub const MAX_KINK_FRACTION: f64 = 0.25;

struct Entry {
    label: String,
    probed: usize,
    kept: usize,
    err: f64,
}

fn entry(label: String, probed: usize, auto: &[f64], numeric: &[f64]) -> Entry {
    let err = if numeric.is_empty() && probed > 0 { f64::INFINITY } else { rel_err(auto, numeric) };
    Entry { label, probed, kept: numeric.len(), err }
}

fn eval_f64<P: Probe>(probe: &P, inputs: &[Tensor<f64>], params: &Params<f64>) -> Tensor<f64> {
    let tape = Tape::inference();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    probe.eval(&tape, params, &vars).expect("forward").value()
}

/// Checks autodiff gradients (computed at precision `S`) of `Σ r ⊙ f(..)`
/// against central differences with step `h`, for every input tensor and
/// every parameter. The difference quotients are evaluated in `f64` so the
/// oracle's own rounding noise stays far below the tolerance.
pub fn check<S: Scalar, P: Probe>(inputs: &[Tensor<S>], params: &Params<S>, h: f64, seed: u64, probe: P) -> GradReport {
    let mut rng = Rng::new(seed ^ 0x5eed);
    let inputs64: Vec<Tensor<f64>> = inputs.iter().map(Tensor::cast).collect();
    let mut params64 = params.cast::<f64>();
    let out0 = eval_f64(&probe, &inputs64, &params64);
    let weights: Vec<f64> = (0..out0.numel()).map(|_| rng.normal()).collect();
    let loss_of = |out: &Tensor<f64>| -> f64 { out.data().iter().zip(&weights).map(|(o, r)| o * r).sum() };

    let tape = Tape::<S>::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = probe.eval(&tape, params, &vars).expect("forward");
    let wt = tape.constant(Tensor::from_f64(&out.shape(), &weights).unwrap());
    let loss = out.mul(wt).unwrap().sum().unwrap();
    let grads = tape.backward(loss).expect("backward");

    let mut entries = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        let auto = grads.get(*v).map(|g| g.to_f64_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let (mut a, mut n) = (Vec::new(), Vec::new());
        let cs = coords(inputs[i].numel(), &mut rng);
        for &c in &cs {
            let mut shifted = inputs64.clone();
            let x = shifted[i].data()[c];
            let fd = smooth_difference(h, |step| {
                shifted[i].data_mut()[c] = x + step;
                loss_of(&eval_f64(&probe, &shifted, &params64))
            });
            if let Some(fd) = fd {
                n.push(fd);
                a.push(auto[c]);
            }
        }
        entries.push(entry(format!("input{i}"), cs.len(), &a, &n));
    }
    let auto_params = grads.params(params);
    let ids: Vec<_> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let auto = auto_params[k].to_f64_vec();
        let (mut a, mut n) = (Vec::new(), Vec::new());
        let cs = coords(params.get(id).numel(), &mut rng);
        for &c in &cs {
            let x = params64.get(id).data()[c];
            let fd = smooth_difference(h, |step| {
                params64.get_mut(id).data_mut()[c] = x + step;
                loss_of(&eval_f64(&probe, &inputs64, &params64))
            });
            params64.get_mut(id).data_mut()[c] = x;
            if let Some(fd) = fd {
                n.push(fd);
                a.push(auto[c]);
            }
        }
        entries.push(entry(params.name(id).to_string(), cs.len(), &a, &n));
    }
    let probed: usize = entries.iter().map(|e| e.probed).sum();
    let kept: usize = entries.iter().map(|e| e.kept).sum();
    let mut entries: Vec<(String, f64)> = entries.into_iter().map(|e| (e.label, e.err)).collect();
    if (probed - kept) as f64 > MAX_KINK_FRACTION * probed as f64 {
        entries.push((format!("kink coverage ({} of {probed} coordinates excluded)", probed - kept), f64::INFINITY));
    }
    GradReport { entries }
}

pub fn randn<S: Scalar>(shape: &[usize], rng: &mut Rng) -> Tensor<S> {
    Tensor::randn(shape, 1.0, rng)
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// A composited layout of `k` random segments on a `res×res` grid.
pub fn random_layout<S: Scalar>(k: usize, res: usize, classes: usize, k_max: usize, rng: &mut Rng) -> gf2_core::compositor::Layout<S> {
    let n = res * res;
    let segments = (0..k)
        .map(|_| {
            let p = softmax(&(0..n).map(|_| 2.0 * rng.normal()).collect::<Vec<_>>());
            let m = softmax(&(0..classes).map(|_| rng.normal()).collect::<Vec<_>>());
            gf2_core::compositor::SegmentDraft {
                p: Tensor::from_f64(&[res, res], &p).unwrap(),
                m: Tensor::from_f64(&[classes], &m).unwrap(),
                d: Tensor::randn(&[res, res], 2.0, rng),
                z: Tensor::zeros(&[0]),
                u: Tensor::zeros(&[0]),
                birth_step: 1,
            }
        })
        .collect();
    gf2_core::compositor::composite(segments, k_max).unwrap()
}

/// A 16² configuration small enough to train for a few steps in a test.
pub fn tiny_config() -> gf2_core::config::Config {
    let mut cfg = gf2_core::config::Config::default();
    let m = &mut cfg.model;
    m.res = 16;
    m.max_segments = 4;
    m.z_dim = 8;
    m.u_dim = 8;
    m.w_dim = 8;
    m.mapping_depth = 1;
    m.planner_channels = vec![8, 8, 8];
    m.executor_channels = vec![8, 8, 8];
    m.attn_dim = 8;
    m.pos_dim = 4;
    m.depth_dim = 4;
    m.gate_dim = 4;
    m.d_stem = [8, 8, 8];
    m.d_segment_hidden = 8;
    cfg.data.toy = gf2_core::toydata::ToyConfig { res: 16, n_min: 1, n_max: 3, size_min: 2.5, size_max: 4.5 };
    cfg.data.count = 32;
    cfg.train.batch = 2;
    cfg.train.steps = gf2_core::config::PhaseSteps { plan: 3, exec: 3, joint: 3 };
    cfg
}

/// The dataset described by `cfg.data`.
pub fn dataset(cfg: &gf2_core::config::Config) -> gf2_core::toydata::Dataset<f32> {
    gf2_core::toydata::Dataset::generate(&cfg.data.toy, cfg.data.seed, cfg.data.count, cfg.model.max_segments).unwrap()
}
