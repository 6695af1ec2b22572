//! Depth-ordered composition of segments into a soft layout, hierarchical
//! layout noise, and the layout file format.
//!
//! Each segment `i` carries a spatial distribution `Pᵢ` and a depth map `dᵢ`;
//! the per-pixel assignment is `Aᵢ = softmaxᵢ(dᵢ + ln Pᵢ)`, so a segment wins
//! a pixel by being in front or by concentrating its shape mass there.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::{Rng, Scalar, Tape, Tensor, Var};

/// Lower clamp applied to `P` before the logarithm.
pub const LOG_P_FLOOR: f64 = -30.0;

const LAYOUT_MAGIC: &[u8; 4] = b"GF2L";
const LAYOUT_VERSION: u32 = 1;

/// One planned object.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentDraft<S> {
    /// `[H, W]` spatial distribution (sums to 1).
    pub p: Tensor<S>,
    /// `[C]` class distribution.
    pub m: Tensor<S>,
    /// `[H, W]` depth values.
    pub d: Tensor<S>,
    /// Raw structure latent.
    pub z: Tensor<S>,
    /// Mapped structure latent `F₁(z)`.
    pub u: Tensor<S>,
    /// Planning step that produced the segment (0 for ground truth and the
    /// non-compositional mode).
    pub birth_step: usize,
}

impl<S: Scalar> SegmentDraft<S> {
    pub fn mean_depth(&self) -> f64 {
        self.d.sum().f64() / self.d.numel() as f64
    }

    pub fn class_index(&self) -> usize {
        argmax(self.m.data())
    }

    /// Inclusive `(y0, x0, y1, x1)` box around pixels holding more than the
    /// uniform share of `P`'s mass.
    pub fn bbox(&self) -> [usize; 4] {
        let (h, w) = (self.p.shape()[0], self.p.shape()[1]);
        let uniform = 1.0 / (h * w) as f64;
        let mut b = [usize::MAX, usize::MAX, 0, 0];
        for y in 0..h {
            for x in 0..w {
                if self.p.data()[y * w + x].f64() > uniform {
                    b = [b[0].min(y), b[1].min(x), b[2].max(y), b[3].max(x)];
                }
            }
        }
        if b[0] == usize::MAX {
            [0, 0, h - 1, w - 1]
        } else {
            b
        }
    }
}

/// How a layout's maps relate to its segments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    /// Maps derived from the segments by depth compositing.
    Composited,
    /// Ground truth: hard assignment from a panoptic mask.
    Ground,
    /// Non-compositional mode: one pseudo-segment, class map produced densely.
    Dense,
}

/// Ordered segments plus the maps derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout<S> {
    pub kind: LayoutKind,
    pub segments: Vec<SegmentDraft<S>>,
    /// `[k, H, W]` per-pixel assignment distribution.
    pub a: Tensor<S>,
    /// `[C, H, W]` class probabilities.
    pub class_map: Tensor<S>,
    /// `[H, W]` assignment-weighted depth.
    pub depth_map: Tensor<S>,
    pub k_max: usize,
}

/// Differentiable composite on a tape.
#[derive(Clone, Copy, Debug)]
pub struct CompositeVars<'t, S: Scalar> {
    /// `[k, H, W]`
    pub a: Var<'t, S>,
    /// `[C, H, W]`
    pub class_map: Var<'t, S>,
    /// `[H, W]`
    pub depth_map: Var<'t, S>,
}

/// Depth compositing on tape values: `p, d: [k, H, W]`, `m: [k, C]`.
pub fn composite_vars<'t, S: Scalar>(
    p: Var<'t, S>,
    d: Var<'t, S>,
    m: Var<'t, S>,
) -> Result<CompositeVars<'t, S>> {
    let (ps, ds, ms) = (p.shape(), d.shape(), m.shape());
    if ps.len() != 3 || ps != ds || ms.len() != 2 || ms[0] != ps[0] {
        return Err(shape_err("composite", format!("P {ps:?}, d {ds:?}, M {ms:?}")));
    }
    if ps[0] == 0 {
        return Err(Error::EmptySegmentList);
    }
    let (k, h, w) = (ps[0], ps[1], ps[2]);
    let logits = d.add(p.clamp_min(LOG_P_FLOOR.exp())?.ln()?)?;
    let a = logits.softmax(0)?;
    let class_map = m.t()?.matmul(a.reshape(&[k, h * w])?)?.reshape(&[ms[1], h, w])?;
    let depth_map = a.mul(d)?.sum_axis(0)?.reshape(&[h, w])?;
    Ok(CompositeVars { a, class_map, depth_map })
}

/// Composites `segments` (all of identical grid and class count).
pub fn composite<S: Scalar>(segments: Vec<SegmentDraft<S>>, k_max: usize) -> Result<Layout<S>> {
    let first = segments.first().ok_or(Error::EmptySegmentList)?;
    let grid = first.p.shape().to_vec();
    let classes = first.m.numel();
    for s in &segments {
        if s.p.shape() != grid.as_slice() || s.d.shape() != grid.as_slice() || s.m.numel() != classes {
            return Err(shape_err("composite", "segments disagree on grid or class count"));
        }
    }
    if segments.len() > k_max {
        return Err(Error::CountMismatch { expected: k_max, got: segments.len() });
    }
    let tape = Tape::inference();
    let stack = |f: &dyn Fn(&SegmentDraft<S>) -> &Tensor<S>| Tensor::stack(&segments.iter().map(|s| f(s).clone()).collect::<Vec<_>>());
    let p = tape.constant(stack(&|s| &s.p)?);
    let d = tape.constant(stack(&|s| &s.d)?);
    let m = tape.constant(stack(&|s| &s.m)?);
    let out = composite_vars(p, d, m)?;
    Ok(Layout {
        kind: LayoutKind::Composited,
        a: out.a.value(),
        class_map: out.class_map.value(),
        depth_map: out.depth_map.value(),
        segments,
        k_max,
    })
}

impl<S: Scalar> Layout<S> {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn res(&self) -> usize {
        self.depth_map.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.class_map.shape()[0]
    }

    /// Ground-truth layout from a panoptic labelling: `instance[p]` indexes
    /// `classes` and `depth` (one entry per instance). Assignment is exactly
    /// one-hot; each instance's depth is constant.
    pub fn from_panoptic(
        res: usize,
        instance: &[usize],
        classes: &[usize],
        depth: &[f64],
        num_classes: usize,
        k_max: usize,
    ) -> Result<Self> {
        let k = classes.len();
        let n = res * res;
        if instance.len() != n || depth.len() != k {
            return Err(shape_err("from_panoptic", format!("{} pixels, {k} classes, {} depths", instance.len(), depth.len())));
        }
        if k == 0 {
            return Err(Error::EmptySegmentList);
        }
        if k > k_max {
            return Err(Error::CountMismatch { expected: k_max, got: k });
        }
        let mut a = vec![S::zero(); k * n];
        let mut area = vec![0usize; k];
        for (px, &i) in instance.iter().enumerate() {
            if i >= k {
                return Err(Error::IndexOutOfRange { index: i, len: k });
            }
            a[i * n + px] = S::one();
            area[i] += 1;
        }
        let mut class_map = vec![S::zero(); num_classes * n];
        let mut depth_map = vec![S::zero(); n];
        for (px, &i) in instance.iter().enumerate() {
            if classes[i] >= num_classes {
                return Err(Error::IndexOutOfRange { index: classes[i], len: num_classes });
            }
            class_map[classes[i] * n + px] = S::one();
            depth_map[px] = S::c(depth[i]);
        }
        let segments = (0..k)
            .map(|i| {
                let mass = area[i].max(1) as f64;
                let p = Tensor::from_fn(&[res, res], |px| if instance[px] == i { S::c(1.0 / mass) } else { S::zero() });
                let mut m = Tensor::zeros(&[num_classes]);
                m.data_mut()[classes[i]] = S::one();
                SegmentDraft {
                    p,
                    m,
                    d: Tensor::full(&[res, res], S::c(depth[i])),
                    z: Tensor::zeros(&[0]),
                    u: Tensor::zeros(&[0]),
                    birth_step: 0,
                }
            })
            .collect();
        Ok(Self {
            kind: LayoutKind::Ground,
            segments,
            a: Tensor::new(&[k, res, res], a)?,
            class_map: Tensor::new(&[num_classes, res, res], class_map)?,
            depth_map: Tensor::new(&[res, res], depth_map)?,
            k_max,
        })
    }

    /// `[k_max, H, W]`: `A` zero-padded to a fixed channel count.
    pub fn instance_map(&self) -> Tensor<S> {
        let (k, h, w) = (self.a.shape()[0], self.a.shape()[1], self.a.shape()[2]);
        let mut data = self.a.data().to_vec();
        data.resize(self.k_max.max(k) * h * w, S::zero());
        Tensor::new(&[self.k_max.max(k), h, w], data).expect("instance map shape")
    }

    /// Discriminator/conditioning tensor `class_map ∥ instance_map`, `[C + k_max, H, W]`.
    pub fn tensor(&self) -> Tensor<S> {
        let mut data = self.class_map.data().to_vec();
        let inst = self.instance_map();
        data.extend_from_slice(inst.data());
        let (c, k, h, w) = (self.classes(), inst.shape()[0], self.res(), self.res());
        Tensor::new(&[c + k, h, w], data).expect("layout tensor shape")
    }

    /// Per-pixel argmax class.
    pub fn class_ids(&self) -> Vec<usize> {
        argmax_channels(&self.class_map)
    }

    /// Per-pixel argmax segment.
    pub fn instance_ids(&self) -> Vec<usize> {
        argmax_channels(&self.a)
    }

    /// Recomputes the maps after the segment list changed. Dense layouts have
    /// no segment-derived class map and are returned unchanged.
    pub fn recomposite(self) -> Result<Self> {
        match self.kind {
            LayoutKind::Dense => Ok(self),
            _ => composite(self.segments, self.k_max),
        }
    }

    /// Layout of every segment except `i` (empty remainder is an error).
    pub fn without(&self, i: usize) -> Result<Self> {
        if i >= self.len() {
            return Err(Error::IndexOutOfRange { index: i, len: self.len() });
        }
        let mut segs = self.segments.clone();
        segs.remove(i);
        composite(segs, self.k_max)
    }

    pub fn sidecar(&self) -> LayoutSidecar {
        LayoutSidecar {
            kind: self.kind,
            classes: self.classes(),
            k_max: self.k_max,
            segments: self
                .segments
                .iter()
                .enumerate()
                .map(|(index, s)| SegmentInfo {
                    index,
                    class: s.class_index(),
                    m: s.m.to_f64_vec(),
                    mean_depth: s.mean_depth(),
                    birth_step: s.birth_step,
                    bbox: s.bbox(),
                })
                .collect(),
        }
    }
}

fn argmax(v: &[impl Scalar]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Argmax over axis 0 of a `[K, H, W]` tensor, per pixel.
pub fn argmax_channels<S: Scalar>(t: &Tensor<S>) -> Vec<usize> {
    let k = t.shape()[0];
    let n = t.numel() / k.max(1);
    (0..n)
        .map(|px| {
            let mut best = 0;
            for c in 1..k {
                if t.data()[c * n + px] > t.data()[best * n + px] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Per-segment summary written next to a layout file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub index: usize,
    pub class: usize,
    pub m: Vec<f64>,
    pub mean_depth: f64,
    pub birth_step: usize,
    pub bbox: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutSidecar {
    pub kind: LayoutKind,
    pub classes: usize,
    pub k_max: usize,
    pub segments: Vec<SegmentInfo>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Binary layout: magic, `u32` version/H/W/k, `A` as `f32`, argmax class as
/// `u8` per pixel, depth map as `f32`; all little-endian.
pub fn encode_layout<S: Scalar>(layout: &Layout<S>) -> Vec<u8> {
    let (k, res) = (layout.len(), layout.res());
    let mut out = Vec::with_capacity(20 + (k + 1) * res * res * 4 + res * res);
    out.extend_from_slice(LAYOUT_MAGIC);
    for v in [LAYOUT_VERSION, res as u32, res as u32, k as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in layout.a.data() {
        out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    out.extend(layout.class_ids().into_iter().map(|c| c.min(255) as u8));
    for v in layout.depth_map.data() {
        out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    out
}

/// Raw contents of a layout file.
#[derive(Clone, Debug, PartialEq)]
pub struct LayoutRecord {
    pub res: usize,
    pub a: Tensor<f32>,
    pub class_ids: Vec<u8>,
    pub depth_map: Tensor<f32>,
}

pub fn decode_layout(bytes: &[u8]) -> Result<LayoutRecord> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("truncated layout".into()))?;
    if &magic != LAYOUT_MAGIC {
        return Err(Error::BadMagic);
    }
    let mut u32s = [0u32; 4];
    for v in &mut u32s {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| Error::Format("truncated layout header".into()))?;
        *v = u32::from_le_bytes(b);
    }
    let [version, h, w, k] = u32s.map(|v| v as usize);
    if version as u32 != LAYOUT_VERSION {
        return Err(Error::VersionMismatch { found: version as u32, expected: LAYOUT_VERSION });
    }
    if h != w {
        return Err(Error::Format(format!("non-square layout {h}×{w}")));
    }
    let n = h * w;
    if r.len() != k * n * 4 + n + n * 4 {
        return Err(Error::Format(format!("layout payload of {} bytes for k={k}, {h}×{w}", r.len())));
    }
    let floats = |b: &[u8]| b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect::<Vec<_>>();
    let a = Tensor::new(&[k, h, w], floats(&r[..k * n * 4]))?;
    let class_ids = r[k * n * 4..k * n * 4 + n].to_vec();
    let depth_map = Tensor::new(&[h, w], floats(&r[k * n * 4 + n..]))?;
    Ok(LayoutRecord { res: h, a, class_ids, depth_map })
}

/// Writes `path` (binary) and `path.json` (sidecar).
pub fn write_layout<S: Scalar>(path: &Path, layout: &Layout<S>) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode_layout(layout))?;
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&layout.sidecar())?)?;
    Ok(())
}

/// Reads a layout written by [`write_layout`]. Segments are rebuilt from the
/// assignment: `Pᵢ ∝ Aᵢ`, constant depth at the recorded mean, `M` from the
/// sidecar. Latents are not stored.
pub fn read_layout<S: Scalar>(path: &Path) -> Result<Layout<S>> {
    let rec = decode_layout(&std::fs::read(path)?)?;
    let side: LayoutSidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
    let (k, res) = (rec.a.shape()[0], rec.res);
    if side.segments.len() != k {
        return Err(Error::CountMismatch { expected: k, got: side.segments.len() });
    }
    let n = res * res;
    let segments = side
        .segments
        .iter()
        .enumerate()
        .map(|(i, info)| {
            let ai = &rec.a.data()[i * n..(i + 1) * n];
            let mass: f64 = ai.iter().map(|&v| v as f64).sum();
            let p = Tensor::from_fn(&[res, res], |px| if mass > 0.0 { S::c(ai[px] as f64 / mass) } else { S::c(1.0 / n as f64) });
            SegmentDraft {
                p,
                m: Tensor::from_f64(&[info.m.len()], &info.m).expect("class vector"),
                d: Tensor::full(&[res, res], S::c(info.mean_depth)),
                z: Tensor::zeros(&[0]),
                u: Tensor::zeros(&[0]),
                birth_step: info.birth_step,
            }
        })
        .collect::<Vec<_>>();
    let mut class_map = vec![S::zero(); side.classes * n];
    match side.kind {
        LayoutKind::Dense => {
            for (px, &c) in rec.class_ids.iter().enumerate() {
                class_map[(c as usize).min(side.classes - 1) * n + px] = S::one();
            }
        }
        _ => {
            for (i, s) in segments.iter().enumerate() {
                for c in 0..side.classes {
                    let mc = s.m.data()[c];
                    for px in 0..n {
                        class_map[c * n + px] += mc * S::c(rec.a.data()[i * n + px] as f64);
                    }
                }
            }
        }
    }
    Ok(Layout {
        kind: side.kind,
        segments,
        a: rec.a.cast(),
        class_map: Tensor::new(&[side.classes, res, res], class_map)?,
        depth_map: rec.depth_map.cast(),
        k_max: side.k_max,
    })
}

/// Standard deviation and grid resolutions of the multi-scale layout noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma: f64,
    /// Coarse to fine; each must divide the layout resolution.
    pub levels: Vec<usize>,
}

impl NoiseConfig {
    /// `{R/4, R/2, R}` at the given sigma.
    pub fn for_resolution(res: usize, sigma: f64) -> Self {
        Self { sigma, levels: vec![res / 4, res / 2, res] }
    }

    pub fn validate(&self, res: usize) -> Result<()> {
        if !(self.sigma >= 0.0) {
            return Err(Error::BadConfig(format!("noise sigma {} must be ≥ 0", self.sigma)));
        }
        for &level in &self.levels {
            if level == 0 || res % level != 0 {
                return Err(Error::BadResolution { level, res });
            }
        }
        Ok(())
    }
}

/// `Σ_levels upsample_nearest(n_level)` with `n_level ~ 𝒩(0, σ²)` i.i.d. per cell.
pub fn hierarchical_noise<S: Scalar>(res: usize, cfg: &NoiseConfig, rng: &mut Rng) -> Result<Tensor<S>> {
    cfg.validate(res)?;
    let mut out = vec![0.0f64; res * res];
    for &level in &cfg.levels {
        let grid: Vec<f64> = (0..level * level).map(|_| rng.normal() * cfg.sigma).collect();
        let f = res / level;
        for y in 0..res {
            for x in 0..res {
                out[y * res + x] += grid[(y / f) * level + x / f];
            }
        }
    }
    Tensor::from_f64(&[res, res], &out)
}

/// Independent hierarchical noise for each channel of a `[Ch, H, W]` tensor.
pub fn layout_noise<S: Scalar>(shape: &[usize], cfg: &NoiseConfig, rng: &mut Rng) -> Result<Tensor<S>> {
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(shape_err("layout_noise", format!("{shape:?}")));
    }
    let mut data = Vec::with_capacity(shape.iter().product());
    for _ in 0..shape[0] {
        data.extend(hierarchical_noise::<S>(shape[1], cfg, rng)?.into_data());
    }
    Tensor::new(shape, data)
}

/// Layout tensor plus fresh channel-wise hierarchical noise.
pub fn noisy_layout<S: Scalar>(layout: &Tensor<S>, cfg: &NoiseConfig, rng: &mut Rng) -> Result<Tensor<S>> {
    let noise = layout_noise::<S>(layout.shape(), cfg, rng)?;
    let data = layout.data().iter().zip(noise.data()).map(|(&a, &b)| a + b).collect();
    Tensor::new(layout.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(p: &[f64], d: &[f64], m: &[f64]) -> SegmentDraft<f64> {
        let n = p.len();
        SegmentDraft {
            p: Tensor::from_f64(&[1, n], p).unwrap(),
            m: Tensor::from_f64(&[m.len()], m).unwrap(),
            d: Tensor::from_f64(&[1, n], d).unwrap(),
            z: Tensor::zeros(&[0]),
            u: Tensor::zeros(&[0]),
            birth_step: 1,
        }
    }

    #[test]
    fn single_segment_owns_everything() {
        let l = composite(vec![seg(&[0.5, 0.5], &[3.0, -1.0], &[0.2, 0.8])], 4).unwrap();
        assert_eq!(l.a.data(), &[1.0, 1.0]);
        assert_eq!(l.instance_map().shape(), &[4, 1, 2]);
    }

    #[test]
    fn empty_list_is_an_error() {
        assert!(matches!(composite::<f32>(vec![], 4), Err(Error::EmptySegmentList)));
    }

    #[test]
    fn zero_sigma_noise_vanishes() {
        let mut rng = Rng::new(1);
        let n: Tensor<f32> = hierarchical_noise(8, &NoiseConfig::for_resolution(8, 0.0), &mut rng).unwrap();
        assert!(n.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            hierarchical_noise::<f32>(8, &NoiseConfig { sigma: 1.0, levels: vec![3] }, &mut rng),
            Err(Error::BadResolution { level: 3, res: 8 })
        ));
    }
}
