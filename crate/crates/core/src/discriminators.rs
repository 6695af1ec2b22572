//! Critics for the two stages.
//!
//! `LayoutDiscriminator` scores layout tensors. `ImageDiscriminator` scores
//! (layout, image) pairs through a shared stride-2 stem and three heads: a
//! scene logit, a U-Net segmentation of the image, and per-segment logits
//! from features pooled under each segment's assignment.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv, Linear, Params, LRELU_SLOPE};
use crate::{Rng, Scalar, Tape, Tensor, Var};

/// Mass below which a pooled segment is treated as empty.
pub const SEGMENT_MASS_FLOOR: f64 = 1e-12;

/// Appends the across-batch standard deviation, averaged to one scalar, as
/// an extra constant channel of `[B, C, H, W]`.
pub fn minibatch_stddev<'t, S: Scalar>(tape: &'t Tape<S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(shape_err("minibatch_stddev", format!("{s:?}")));
    }
    let centered = x.sub(x.mean_axis(0)?)?;
    let sd = centered.square()?.mean_axis(0)?.add_scalar(1e-8)?.sqrt()?.mean()?.reshape(&[1, 1, 1, 1])?;
    let ones = tape.constant(Tensor::ones(&[s[0], 1, s[2], s[3]]));
    tape.concat(&[x, ones.mul(sd)?], 1)
}

/// Masked average pooling: row `i` is `Σ_p A_i(p)·F(p) / Σ_p A_i(p)` for
/// `features: [n, F]` and `a: [k, n]`. Segments with no mass get a zero row
/// and a `true` skip flag.
pub fn segment_pool<'t, S: Scalar>(tape: &'t Tape<S>, features: Var<'t, S>, a: Var<'t, S>) -> Result<(Var<'t, S>, Vec<bool>)> {
    let (fs, as_) = (features.shape(), a.shape());
    if fs.len() != 2 || as_.len() != 2 || as_[1] != fs[0] {
        return Err(shape_err("segment_pool", format!("features {fs:?}, assignment {as_:?}")));
    }
    let mass = a.sum_axis(1)?;
    let skipped: Vec<bool> = mass.value().data().iter().map(|m| m.f64() <= SEGMENT_MASS_FLOOR).collect();
    let denom = mass.clamp_min(SEGMENT_MASS_FLOOR)?;
    let pooled = a.matmul(features)?.div(denom)?;
    if skipped.iter().any(|&s| s) {
        let keep = Tensor::from_fn(&[as_[0], 1], |i| if skipped[i] { S::zero() } else { S::one() });
        return Ok((pooled.mul(tape.constant(keep))?, skipped));
    }
    Ok((pooled, skipped))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub res: usize,
    pub classes: usize,
    pub max_segments: usize,
    /// Channels of the three stride-2 stem blocks.
    pub stem: [usize; 3],
    /// Hidden width of the per-segment scorer.
    pub segment_hidden: usize,
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.res < 8 || self.res % 8 != 0 {
            return Err(Error::BadConfig(format!("discriminator resolution {} must be a multiple of 8", self.res)));
        }
        Ok(())
    }

    pub fn layout_channels(&self) -> usize {
        self.classes + self.max_segments
    }
}

/// Conv stack over layout tensors to a scalar logit per batch item.
#[derive(Clone, Debug)]
pub struct LayoutDiscriminator {
    cfg: DiscriminatorConfig,
    blocks: Vec<Conv>,
    tail: Conv,
    out: Linear,
}

impl LayoutDiscriminator {
    pub fn new<S: Scalar>(params: &mut Params<S>, cfg: &DiscriminatorConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut cin = cfg.layout_channels();
        let mut blocks = Vec::new();
        for (i, &c) in cfg.stem.iter().enumerate() {
            blocks.push(Conv::new(params, &format!("d_layout.b{i}"), cin, c, 3, 2, rng));
            cin = c;
        }
        let tail = Conv::new(params, "d_layout.tail", cin + 1, cin, 3, 1, rng);
        let r = cfg.res / 8;
        let out = Linear::new(params, "d_layout.out", cin * r * r, 1, Some(0.0), rng);
        Ok(Self { cfg: cfg.clone(), blocks, tail, out })
    }

    /// `[B, C + K, R, R]` → `[B, 1]`.
    pub fn forward<'t, S: Scalar>(&self, tape: &'t Tape<S>, params: &Params<S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let s = x.shape();
        let (ch, r) = (self.cfg.layout_channels(), self.cfg.res);
        if s.len() != 4 || s[1..] != [ch, r, r] {
            return Err(shape_err("d_layout", format!("input {s:?}, expected [B, {ch}, {r}, {r}]")));
        }
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(tape, params, h)?.leaky_relu(LRELU_SLOPE)?;
        }
        h = self.tail.forward(tape, params, minibatch_stddev(tape, h)?)?.leaky_relu(LRELU_SLOPE)?;
        let hs = h.shape();
        self.out.forward(tape, params, h.reshape(&[hs[0], hs[1] * hs[2] * hs[3]])?)
    }
}

/// Which heads of the image discriminator are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSelect {
    /// The stem sees the layout (false: layout channels are zeroed).
    pub conditional: bool,
    pub segmentation: bool,
    pub segments: bool,
}

/// Outputs of [`ImageDiscriminator::forward`].
#[derive(Clone, Debug)]
pub struct ImageLogits<'t, S: Scalar> {
    /// `[B, 1]`
    pub scene: Var<'t, S>,
    /// `[B, C, R, R]` per-pixel class logits.
    pub seg: Option<Var<'t, S>>,
    /// Per batch item: `[k]` segment logits and skip flags.
    pub segments: Vec<(Var<'t, S>, Vec<bool>)>,
}

/// The (layout, image) critic.
#[derive(Clone, Debug)]
pub struct ImageDiscriminator {
    cfg: DiscriminatorConfig,
    stem: Vec<Conv>,
    tail: Conv,
    scene: Linear,
    dec: Vec<Conv>,
    seg_out: Conv,
    seg_hidden: Linear,
    seg_score: Linear,
}

impl ImageDiscriminator {
    pub fn new<S: Scalar>(params: &mut Params<S>, cfg: &DiscriminatorConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let [c1, c2, c3] = cfg.stem;
        let mut cin = cfg.layout_channels() + 3;
        let mut stem = Vec::new();
        for (i, &c) in cfg.stem.iter().enumerate() {
            stem.push(Conv::new(params, &format!("d_image.stem{i}"), cin, c, 3, 2, rng));
            cin = c;
        }
        let tail = Conv::new(params, "d_image.tail", c3 + 1, c3, 3, 1, rng);
        let r = cfg.res / 8;
        let scene = Linear::new(params, "d_image.scene", c3 * r * r, 1, Some(0.0), rng);
        let dec = vec![
            Conv::new(params, "d_image.dec0", c3 + c2, c2, 3, 1, rng),
            Conv::new(params, "d_image.dec1", c2 + c1, c1, 3, 1, rng),
            Conv::new(params, "d_image.dec2", c1, c1, 3, 1, rng),
        ];
        let seg_out = Conv::new(params, "d_image.seg_out", c1, cfg.classes, 1, 1, rng);
        let seg_hidden = Linear::new(params, "d_image.segment_hidden", c3, cfg.segment_hidden, Some(0.0), rng);
        let seg_score = Linear::new(params, "d_image.segment_score", cfg.segment_hidden, 1, Some(0.0), rng);
        Ok(Self { cfg: cfg.clone(), stem, tail, scene, dec, seg_out, seg_hidden, seg_score })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    fn check_inputs<S: Scalar>(&self, s: &Var<'_, S>, x: &Var<'_, S>) -> Result<usize> {
        let (ss, xs) = (s.shape(), x.shape());
        let (ch, r) = (self.cfg.layout_channels(), self.cfg.res);
        if ss.len() != 4 || xs.len() != 4 || ss[0] != xs[0] || ss[1..] != [ch, r, r] || xs[1..] != [3, r, r] {
            return Err(shape_err("d_image", format!("S {ss:?}, X {xs:?}")));
        }
        Ok(ss[0])
    }

    /// Stem features at `R/2`, `R/4`, `R/8` for input `[B, C + K + 3, R, R]`.
    fn stem<'t, S: Scalar>(&self, tape: &'t Tape<S>, params: &Params<S>, input: Var<'t, S>) -> Result<Vec<Var<'t, S>>> {
        let mut feats = Vec::with_capacity(3);
        let mut h = input;
        for conv in &self.stem {
            h = conv.forward(tape, params, h)?.leaky_relu(LRELU_SLOPE)?;
            feats.push(h);
        }
        Ok(feats)
    }

    fn stem_input<'t, S: Scalar>(&self, tape: &'t Tape<S>, s: Option<Var<'t, S>>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let s = match s {
            Some(s) => s,
            None => {
                let xs = x.shape();
                tape.constant(Tensor::zeros(&[xs[0], self.cfg.layout_channels(), xs[2], xs[3]]))
            }
        };
        tape.concat(&[s, x], 1)
    }

    /// Image-only stem features flattened to `[B, F]` (the metric feature space).
    pub fn image_features<'t, S: Scalar>(&self, tape: &'t Tape<S>, params: &Params<S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let f = self.stem(tape, params, self.stem_input(tape, None, x)?)?;
        let s = f[2].shape();
        f[2].reshape(&[s[0], s[1] * s[2] * s[3]])
    }

    /// U-Net class logits `[B, C, R, R]` predicted from the image alone.
    pub fn segment_image<'t, S: Scalar>(&self, tape: &'t Tape<S>, params: &Params<S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let f = self.stem(tape, params, self.stem_input(tape, None, x)?)?;
        let mut h = f[2].upsample_nearest(2)?;
        h = self.dec[0].forward(tape, params, tape.concat(&[h, f[1]], 1)?)?.leaky_relu(LRELU_SLOPE)?;
        h = h.upsample_nearest(2)?;
        h = self.dec[1].forward(tape, params, tape.concat(&[h, f[0]], 1)?)?.leaky_relu(LRELU_SLOPE)?;
        h = h.upsample_nearest(2)?;
        h = self.dec[2].forward(tape, params, h)?.leaky_relu(LRELU_SLOPE)?;
        self.seg_out.forward(tape, params, h)
    }

    /// Per-segment logits `[k]` for stem features `[1, F, r, r]` and assignment `[k, R, R]`.
    fn segment_logits<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        params: &Params<S>,
        feat: Var<'t, S>,
        a: Var<'t, S>,
    ) -> Result<(Var<'t, S>, Vec<bool>)> {
        let fs = feat.shape();
        let k = a.shape()[0];
        let r = fs[2];
        let factor = self.cfg.res / r;
        let a_down = a.avg_pool(factor)?.reshape(&[k, r * r])?;
        let pix = feat.reshape(&[fs[1], r * r])?.t()?;
        let (pooled, skipped) = segment_pool(tape, pix, a_down)?;
        let h = self.seg_hidden.forward(tape, params, pooled)?.leaky_relu(LRELU_SLOPE)?;
        Ok((self.seg_score.forward(tape, params, h)?.reshape(&[k])?, skipped))
    }

    /// Scores a batch: `s: [B, C + K, R, R]`, `x: [B, 3, R, R]`, and one
    /// assignment `[k_b, R, R]` per item for the segment head.
    pub fn forward<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        params: &Params<S>,
        s: Var<'t, S>,
        x: Var<'t, S>,
        assignments: &[Var<'t, S>],
        heads: HeadSelect,
    ) -> Result<ImageLogits<'t, S>> {
        let b = self.check_inputs(&s, &x)?;
        let f = self.stem(tape, params, self.stem_input(tape, heads.conditional.then_some(s), x)?)?;
        let h = self.tail.forward(tape, params, minibatch_stddev(tape, f[2])?)?.leaky_relu(LRELU_SLOPE)?;
        let hs = h.shape();
        let scene = self.scene.forward(tape, params, h.reshape(&[b, hs[1] * hs[2] * hs[3]])?)?;
        let seg = if heads.segmentation { Some(self.segment_image(tape, params, x)?) } else { None };
        let mut segments = Vec::new();
        if heads.segments {
            if assignments.len() != b {
                return Err(Error::CountMismatch { expected: b, got: assignments.len() });
            }
            for (i, a) in assignments.iter().enumerate() {
                let feat = if b == 1 { f[2] } else { f[2].narrow(0, i, 1)? };
                segments.push(self.segment_logits(tape, params, feat, *a)?);
            }
        }
        Ok(ImageLogits { scene, seg, segments })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stddev_channel_is_constant() {
        let mut rng = Rng::new(0);
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::randn(&[3, 2, 2, 2], 1.0, &mut rng));
        let y = minibatch_stddev(&tape, x).unwrap().value();
        assert_eq!(y.shape(), &[3, 3, 2, 2]);
        let v = y.at(&[0, 2, 0, 0]);
        assert!(v > 0.0);
        for b in 0..3 {
            for p in 0..4 {
                assert_eq!(y.at(&[b, 2, p / 2, p % 2]), v);
            }
        }
    }
}
