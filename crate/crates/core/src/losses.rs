//! Training objectives: logistic adversarial losses, R1, semantic matching,
//! segment fidelity and the edge-matching baseline.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::{Scalar, Tape, Tensor, Var};

/// Generator loss `mean softplus(−fake)`.
pub fn g_loss_nonsat<'t, S: Scalar>(fake: Var<'t, S>) -> Result<Var<'t, S>> {
    fake.neg()?.softplus()?.mean()
}

/// Critic loss `mean softplus(−real) + mean softplus(fake)`.
pub fn d_loss_nonsat<'t, S: Scalar>(real: Var<'t, S>, fake: Var<'t, S>) -> Result<Var<'t, S>> {
    real.neg()?.softplus()?.mean()?.add(fake.softplus()?.mean()?)
}

/// R1 penalty on one batch.
#[derive(Clone, Copy, Debug)]
pub struct R1<'t, S: Scalar> {
    /// `(γ/2)·mean_b ‖∇ₓD(x_b)‖²`.
    pub value: f64,
    /// Scalar whose parameter gradient equals that of `value`.
    pub surrogate: Var<'t, S>,
}

/// Relative size of the finite-difference step used by [`r1_penalty`].
pub const R1_FD_STEP: f64 = 1e-2;

/// Computes the R1 penalty of critic `d` at `x` (batch on axis 0).
///
/// The input gradient `g = ∇ₓ ΣD(x)` comes from an ordinary backward pass on
/// a scratch tape. Its parameter gradient `γ/B · (∂g/∂θ)ᵀ g` is a
/// Hessian-vector product, obtained as the parameter gradient of the
/// directional difference `γ/B · ‖g‖ · [ΣD(x + εĝ) − ΣD(x − εĝ)] / 2ε`
/// with `ĝ = g/‖g‖` held constant. The difference is exact for critics that
/// are linear in their input and second-order accurate otherwise.
pub fn r1_penalty<'t, S, F>(tape: &'t Tape<S>, x: &Tensor<S>, gamma: f64, d: F) -> Result<R1<'t, S>>
where
    S: Scalar,
    F: for<'a> Fn(&'a Tape<S>, Var<'a, S>) -> Result<Var<'a, S>>,
{
    let b = x.shape().first().copied().unwrap_or(1).max(1) as f64;
    let scratch = Tape::new();
    let xv = scratch.leaf(x.clone(), true);
    let out = d(&scratch, xv)?.sum()?;
    let grads = scratch.backward(out)?;
    let g = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let norm = g.data().iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
    let value = 0.5 * gamma * norm * norm / b;
    if norm == 0.0 || gamma == 0.0 {
        return Ok(R1 { value, surrogate: tape.scalar(0.0) });
    }
    let x_norm = x.data().iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
    let eps = R1_FD_STEP * x_norm.max(1.0);
    let shifted = |sign: f64| Tensor::from_fn(x.shape(), |i| x.data()[i] + S::c(sign * eps * g.data()[i].f64() / norm));
    let plus = d(tape, tape.constant(shifted(1.0)))?.sum()?;
    let minus = d(tape, tape.constant(shifted(-1.0)))?.sum()?;
    let surrogate = plus.sub(minus)?.scale(gamma * norm / (b * 2.0 * eps))?;
    Ok(R1 { value, surrogate })
}

/// Lazy regularization: apply every `interval` steps, scaled by `interval`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LazySchedule {
    pub interval: usize,
}

impl LazySchedule {
    /// Multiplier for `step`: `interval` on due steps, 0 otherwise.
    pub fn multiplier(&self, step: usize) -> f64 {
        let n = self.interval.max(1);
        if step % n == 0 {
            n as f64
        } else {
            0.0
        }
    }
}

/// Soft cross-entropy `−Σ_c S(c)·log softmax(logits)(c)`, averaged over
/// pixels, for `[B, C, H, W]` logits and targets.
pub fn semantic_matching_loss<'t, S: Scalar>(logits: Var<'t, S>, target: Var<'t, S>) -> Result<Var<'t, S>> {
    let (ls, ts) = (logits.shape(), target.shape());
    if ls != ts || ls.len() != 4 {
        return Err(shape_err("semantic_matching", format!("logits {ls:?} vs target {ts:?}")));
    }
    let pixels = (ls[0] * ls[2] * ls[3]) as f64;
    logits.log_softmax(1)?.mul(target)?.sum()?.scale(-1.0 / pixels)
}

/// Which side of the game a segment-fidelity loss is computed for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    DReal,
    DFake,
    G,
}

/// Logistic loss averaged over all non-skipped segments of a batch:
/// `softplus(−l)` for real/generator branches, `softplus(l)` for fakes.
pub fn segment_fidelity_loss<'t, S: Scalar>(
    tape: &'t Tape<S>,
    segments: &[(Var<'t, S>, Vec<bool>)],
    branch: Branch,
) -> Result<Var<'t, S>> {
    let kept: usize = segments.iter().map(|(_, s)| s.iter().filter(|&&x| !x).count()).sum();
    if kept == 0 {
        return Err(Error::AllSegmentsSkipped);
    }
    let mut total: Option<Var<'t, S>> = None;
    for (logits, skipped) in segments {
        if logits.shape() != [skipped.len()] {
            return Err(shape_err("segment_fidelity", format!("{:?} logits for {} flags", logits.shape(), skipped.len())));
        }
        let signed = if branch == Branch::DFake { *logits } else { logits.neg()? };
        let keep = Tensor::from_fn(&[skipped.len()], |i| if skipped[i] { S::zero() } else { S::one() });
        let term = signed.softplus()?.mul(tape.constant(keep))?.sum()?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    total.expect("non-empty").scale(1.0 / kept as f64)
}

/// Soft 4-neighbourhood edge map `[B, 1, H, W]` of class probabilities
/// `[B, C, H, W]`: `1 − Π_nb (1 − ½Σ_c|p − p_nb|)`. On one-hot maps this is
/// the class-change indicator.
pub fn soft_edges<'t, S: Scalar>(tape: &'t Tape<S>, p: Var<'t, S>) -> Result<Var<'t, S>> {
    let s = p.shape();
    if s.len() != 4 || s[2] < 2 || s[3] < 2 {
        return Err(shape_err("soft_edges", format!("{s:?}")));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    let keep = |axis: usize, len: usize| -> Result<Var<'t, S>> {
        let diff = p.narrow(axis, 1, len - 1)?.sub(p.narrow(axis, 0, len - 1)?)?;
        diff.abs()?.sum_axis(1)?.scale(-0.5)?.add_scalar(1.0)
    };
    let kx = keep(3, w)?;
    let ky = keep(2, h)?;
    let one_col = tape.constant(Tensor::ones(&[b, 1, h, 1]));
    let one_row = tape.constant(Tensor::ones(&[b, 1, 1, w]));
    let right = tape.concat(&[kx, one_col], 3)?;
    let left = tape.concat(&[one_col, kx], 3)?;
    let down = tape.concat(&[ky, one_row], 2)?;
    let up = tape.concat(&[one_row, ky], 2)?;
    right.mul(left)?.mul(down)?.mul(up)?.neg()?.add_scalar(1.0)
}

/// Smoothed edge IoU loss `1 − (Σee′ + 1)/(Σ(e + e′ − ee′) + 1)` between the
/// edges of two `[B, C, H, W]` class maps, on the soft edge maps.
pub fn edge_matching_soft<'t, S: Scalar>(tape: &'t Tape<S>, s: Var<'t, S>, s_pred: Var<'t, S>) -> Result<Var<'t, S>> {
    if s.shape() != s_pred.shape() {
        return Err(shape_err("edge_matching", format!("{:?} vs {:?}", s.shape(), s_pred.shape())));
    }
    let e = soft_edges(tape, s)?;
    let e2 = soft_edges(tape, s_pred)?;
    let inter = e.mul(e2)?;
    let union = e.add(e2)?.sub(inter)?;
    let ratio = inter.sum()?.add_scalar(1.0)?.div(union.sum()?.add_scalar(1.0)?)?;
    ratio.neg()?.add_scalar(1.0)
}

fn edge_counts(a: &[usize], b: &[usize], h: usize, w: usize) -> (usize, usize) {
    let edges = |m: &[usize]| -> Vec<bool> {
        (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                (x > 0 && m[i - 1] != m[i])
                    || (x + 1 < w && m[i + 1] != m[i])
                    || (y > 0 && m[i - w] != m[i])
                    || (y + 1 < h && m[i + w] != m[i])
            })
            .collect()
    };
    let (ea, eb) = (edges(a), edges(b));
    let inter = ea.iter().zip(&eb).filter(|(x, y)| **x && **y).count();
    let union = ea.iter().zip(&eb).filter(|(x, y)| **x || **y).count();
    (inter, union)
}

/// Hard edge IoU loss between two label maps of size `h×w`.
pub fn edge_matching_hard(a: &[usize], b: &[usize], h: usize, w: usize) -> f64 {
    let (inter, union) = edge_counts(a, b, h, w);
    1.0 - (inter as f64 + 1.0) / (union as f64 + 1.0)
}

/// Edge matching whose value is the hard (argmax) loss and whose gradient is
/// the soft surrogate's. Edges of all batch items are pooled into one IoU.
pub fn edge_matching_loss<'t, S: Scalar>(tape: &'t Tape<S>, s: Var<'t, S>, s_pred: Var<'t, S>) -> Result<Var<'t, S>> {
    let soft = edge_matching_soft(tape, s, s_pred)?;
    let (sv, pv) = (s.value(), s_pred.value());
    let sh = sv.shape().to_vec();
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let (mut inter, mut union) = (0, 0);
    for i in 0..b {
        let ids = |t: &Tensor<S>| crate::compositor::argmax_channels(&t.index0(i).reshape(&[c, h, w]).expect("slice"));
        let (n, u) = edge_counts(&ids(&sv), &ids(&pv), h, w);
        inter += n;
        union += u;
    }
    let hard = 1.0 - (inter as f64 + 1.0) / (union as f64 + 1.0);
    soft.add_scalar(hard - soft.item().f64())
}

/// Relative weights of the loss terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub adv: f64,
    pub sm: f64,
    pub sf: f64,
    pub em: f64,
    /// R1 strength `γ`.
    pub r1_gamma: f64,
    pub r1_interval: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { adv: 1.0, sm: 1.0, sf: 1.0, em: 1.0, r1_gamma: 10.0, r1_interval: 16 }
    }
}

/// Named loss values of one step with their weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
}

impl LossReport {
    pub fn record(&mut self, name: &str, value: f64, weight: f64) {
        self.terms.insert(name.to_string(), value);
        self.weights.insert(name.to_string(), weight);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.get(name).copied()
    }

    pub fn total(&self) -> f64 {
        self.terms.iter().map(|(k, v)| v * self.weights.get(k).copied().unwrap_or(1.0)).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.terms.values().all(|v| v.is_finite())
    }
}

/// Streams `step,name,value` rows.
pub struct CurveWriter<W: Write> {
    out: W,
}

impl<W: Write> CurveWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "step,name,value")?;
        Ok(Self { out })
    }

    /// Continues an existing curve file without writing the header again.
    pub fn resume(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, step: usize, report: &LossReport) -> Result<()> {
        for (name, value) in &report.terms {
            writeln!(self.out, "{step},{name},{value}")?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lazy_multiplier() {
        let s = LazySchedule { interval: 16 };
        assert_eq!(s.multiplier(0), 16.0);
        assert_eq!(s.multiplier(5), 0.0);
        assert_eq!(s.multiplier(32), 16.0);
    }

    #[test]
    fn csv_rows() {
        let mut buf = Vec::new();
        let mut r = LossReport::default();
        r.record("g_adv", 0.5, 1.0);
        let mut w = CurveWriter::new(&mut buf).unwrap();
        w.write(3, &r).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,name,value\n3,g_adv,0.5\n");
    }
}
