//! Procedural toy scenes with exact panoptic ground truth.
//!
//! A scene is a flat-colour background with a few circles, squares and
//! triangles painted back to front. Object colours come from a palette of
//! six (two per shape kind) and backgrounds from two greys, so the colour of
//! a pixel determines its class and the rule-based [`oracle_segment`] can
//! recover the layout of clean renders exactly.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compositor::{write_layout, Layout};
use crate::error::{Error, Result};
use crate::{Rng, Scalar, Tensor};

/// Background plus three shape kinds.
pub const NUM_CLASSES: usize = 4;
pub const BACKGROUND: usize = 0;

/// RGB in `[−1, 1]`: six object colours then two background greys.
pub const PALETTE: [[f32; 3]; 8] = [
    [0.95, -0.6, -0.6],
    [0.9, 0.85, -0.65],
    [-0.6, 0.8, -0.6],
    [-0.65, 0.75, 0.9],
    [-0.55, -0.55, 0.95],
    [0.85, -0.6, 0.9],
    [-0.45, -0.45, -0.45],
    [0.15, 0.15, 0.15],
];

/// Palette entries usable as background.
pub const BACKGROUND_COLORS: [usize; 2] = [6, 7];

/// Class of each palette entry.
pub fn color_class(color: usize) -> usize {
    if color >= 6 {
        BACKGROUND
    } else {
        1 + color / 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn class(self) -> usize {
        match self {
            ShapeKind::Circle => 1,
            ShapeKind::Square => 2,
            ShapeKind::Triangle => 3,
        }
    }

    pub fn from_class(c: usize) -> Option<Self> {
        ShapeKind::ALL.into_iter().find(|k| k.class() == c)
    }

    /// Whether pixel centre offset `(dy, dx)` from the shape centre is inside
    /// a shape of half-extent `r`.
    pub fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            ShapeKind::Circle => dy * dy + dx * dx <= r * r,
            ShapeKind::Square => dy.abs() <= r && dx.abs() <= r,
            // Apex at (−r, 0), base on dy = r spanning dx ∈ [−r, r].
            ShapeKind::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    /// Palette index; always one of the two colours of `kind`.
    pub color: usize,
    /// `(y, x)` in pixels.
    pub center: [f64; 2],
    /// Half-extent in pixels.
    pub size: f64,
    /// Paint order; larger is in front.
    pub z: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub res: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub size_min: f64,
    pub size_max: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { res: 32, n_min: 1, n_max: 4, size_min: 4.0, size_max: 8.0 }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.res < 8 || self.n_min > self.n_max || self.n_max > 250 {
            return Err(Error::BadConfig(format!("toy scene counts/resolution {self:?}")));
        }
        if !(self.size_min > 0.0 && self.size_min <= self.size_max && 2.0 * self.size_max < self.res as f64) {
            return Err(Error::BadConfig(format!("toy shape sizes {}..{} at resolution {}", self.size_min, self.size_max, self.res)));
        }
        Ok(())
    }
}

/// A rendered scene and its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyScene {
    pub res: usize,
    /// In paint order.
    pub shapes: Vec<Shape>,
    pub background: usize,
    /// `[3, R, R]` channel-first RGB in `[−1, 1]`.
    pub image: Vec<f32>,
    /// Per pixel: 0 for background, `1 + j` for `shapes[j]`.
    pub instance: Vec<usize>,
}

impl ToyScene {
    /// Class of each instance id (background first).
    pub fn instance_classes(&self) -> Vec<usize> {
        std::iter::once(BACKGROUND).chain(self.shapes.iter().map(|s| s.kind.class())).collect()
    }

    /// Depth rank of each instance id (background 0, then paint order).
    pub fn depth_ranks(&self) -> Vec<usize> {
        std::iter::once(0).chain(self.shapes.iter().map(|s| s.z + 1)).collect()
    }

    pub fn class_map(&self) -> Vec<usize> {
        let cls = self.instance_classes();
        self.instance.iter().map(|&i| cls[i]).collect()
    }

    /// Pixels covered by more than one shape.
    pub fn occluded_pixels(&self) -> usize {
        let r = self.res;
        (0..r * r)
            .filter(|&p| {
                let (y, x) = ((p / r) as f64 + 0.5, (p % r) as f64 + 0.5);
                self.shapes.iter().filter(|s| s.kind.contains(y - s.center[0], x - s.center[1], s.size)).count() > 1
            })
            .count()
    }

    pub fn image_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::new(&[3, self.res, self.res], self.image.iter().map(|&v| S::c(v as f64)).collect()).expect("image shape")
    }

    /// Ground-truth layout over visible instances only, ordered background
    /// first and then by depth; depth values are the depth ranks.
    pub fn layout<S: Scalar>(&self, k_max: usize) -> Result<Layout<S>> {
        let classes = self.instance_classes();
        let ranks = self.depth_ranks();
        let mut visible = vec![false; classes.len()];
        for &i in &self.instance {
            visible[i] = true;
        }
        let mut remap = vec![usize::MAX; classes.len()];
        let (mut vis_classes, mut vis_depth) = (Vec::new(), Vec::new());
        for i in 0..classes.len() {
            if visible[i] {
                remap[i] = vis_classes.len();
                vis_classes.push(classes[i]);
                vis_depth.push(ranks[i] as f64);
            }
        }
        let inst: Vec<usize> = self.instance.iter().map(|&i| remap[i]).collect();
        Layout::from_panoptic(self.res, &inst, &vis_classes, &vis_depth, NUM_CLASSES, k_max)
    }

    pub fn visible_instances(&self) -> usize {
        let mut seen = vec![false; self.shapes.len() + 1];
        for &i in &self.instance {
            seen[i] = true;
        }
        seen.iter().filter(|&&s| s).count()
    }
}

/// Samples scene `index` of the dataset with `seed`.
pub fn gen_scene(cfg: &ToyConfig, seed: u64, index: u64) -> Result<ToyScene> {
    cfg.validate()?;
    let mut rng = Rng::new(seed).fork_idx("scene", index);
    let n = rng.int_range(cfg.n_min, cfg.n_max);
    let background = BACKGROUND_COLORS[rng.below(BACKGROUND_COLORS.len())];
    let shapes = (0..n)
        .map(|z| {
            let kind = ShapeKind::ALL[rng.below(3)];
            let color = 2 * (kind.class() - 1) + rng.below(2);
            let size = rng.uniform_range(cfg.size_min, cfg.size_max);
            let (lo, hi) = (size, cfg.res as f64 - size);
            let center = [rng.uniform_range(lo, hi), rng.uniform_range(lo, hi)];
            Shape { kind, color, center, size, z }
        })
        .collect();
    Ok(render_scene(cfg.res, shapes, background))
}

/// Paints `shapes` back to front (by `z`) over `background`, without anti-aliasing.
pub fn render_scene(res: usize, mut shapes: Vec<Shape>, background: usize) -> ToyScene {
    shapes.sort_by_key(|s| s.z);
    let n = res * res;
    let mut instance = vec![0usize; n];
    for (j, s) in shapes.iter().enumerate() {
        for (p, slot) in instance.iter_mut().enumerate() {
            let (y, x) = ((p / res) as f64 + 0.5, (p % res) as f64 + 0.5);
            if s.kind.contains(y - s.center[0], x - s.center[1], s.size) {
                *slot = j + 1;
            }
        }
    }
    let mut image = vec![0f32; 3 * n];
    for (p, &i) in instance.iter().enumerate() {
        let rgb = PALETTE[if i == 0 { background } else { shapes[i - 1].color }];
        for c in 0..3 {
            image[c * n + p] = rgb[c];
        }
    }
    ToyScene { res, shapes, background, image, instance }
}

/// Per-pixel nearest palette entry of a `[3, R, R]` image.
pub fn quantize<S: Scalar>(image: &Tensor<S>) -> Vec<usize> {
    let n = image.numel() / 3;
    let d = image.data();
    (0..n)
        .map(|p| {
            let px = [d[p].f64(), d[n + p].f64(), d[2 * n + p].f64()];
            let dist = |c: &[f32; 3]| (0..3).map(|i| (px[i] - c[i] as f64).powi(2)).sum::<f64>();
            let mut best = 0;
            for (i, c) in PALETTE.iter().enumerate() {
                if dist(c) < dist(&PALETTE[best]) {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Rule-based segmentation of a toy image.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleSegmentation {
    pub res: usize,
    pub classes: Vec<usize>,
    /// 4-connected components of equal palette colour.
    pub instances: Vec<usize>,
    /// Palette colour of each instance.
    pub instance_colors: Vec<usize>,
}

/// Quantizes to the palette, maps colours to classes and splits instances
/// into 4-connected components of equal colour.
pub fn oracle_segment<S: Scalar>(image: &Tensor<S>) -> OracleSegmentation {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let colors = quantize(image);
    let mut instances = vec![usize::MAX; h * w];
    let mut instance_colors = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if instances[start] != usize::MAX {
            continue;
        }
        let id = instance_colors.len();
        instance_colors.push(colors[start]);
        instances[start] = id;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if instances[q] == usize::MAX && colors[q] == colors[start] {
                    instances[q] = id;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
    }
    let classes = colors.iter().map(|&c| color_class(c)).collect();
    OracleSegmentation { res: h, classes, instances, instance_colors }
}

/// Attributes of one detected object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectAttributes {
    pub kind: ShapeKind,
    pub color: usize,
    /// `(y, x)` mean of pixel centres.
    pub centroid: [f64; 2],
    pub area: usize,
}

/// Non-background components of the oracle segmentation with their
/// attributes, in order of first appearance (raster scan).
pub fn extract_attributes<S: Scalar>(image: &Tensor<S>) -> Vec<ObjectAttributes> {
    let seg = oracle_segment(image);
    let w = seg.res;
    let k = seg.instance_colors.len();
    let mut acc = vec![(0.0f64, 0.0f64, 0usize); k];
    for (p, &i) in seg.instances.iter().enumerate() {
        acc[i].0 += (p / w) as f64 + 0.5;
        acc[i].1 += (p % w) as f64 + 0.5;
        acc[i].2 += 1;
    }
    (0..k)
        .filter_map(|i| {
            let color = seg.instance_colors[i];
            let kind = ShapeKind::from_class(color_class(color))?;
            let (sy, sx, area) = acc[i];
            Some(ObjectAttributes { kind, color, centroid: [sy / area as f64, sx / area as f64], area })
        })
        .collect()
}

/// `[3, R, R]` in `[−1, 1]` to 8-bit RGB bytes (row-major, interleaved).
pub fn to_rgb8<S: Scalar>(image: &Tensor<S>) -> Vec<u8> {
    let s = image.shape();
    let n = s[1] * s[2];
    let d = image.data();
    (0..n)
        .flat_map(|p| (0..3).map(move |c| (((d[c * n + p].f64().clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8))
        .collect()
}

/// Inverse of [`to_rgb8`] up to quantization.
pub fn from_rgb8<S: Scalar>(bytes: &[u8], h: usize, w: usize) -> Result<Tensor<S>> {
    let n = h * w;
    if bytes.len() != 3 * n {
        return Err(Error::Format(format!("{} bytes for a {h}×{w} RGB image", bytes.len())));
    }
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / n, i % n);
        S::c(bytes[3 * p + c] as f64 / 127.5 - 1.0)
    }))
}

/// Binary PPM (P6, maxval 255).
pub fn write_ppm(path: &Path, rgb: &[u8], h: usize, w: usize) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{w} {h}\n255\n")?;
    f.write_all(rgb)?;
    f.flush()?;
    Ok(())
}

/// Encodes a PPM in memory.
pub fn encode_ppm(rgb: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Reads a P6 PPM: `(rgb, height, width)`.
pub fn read_ppm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize)> {
    let mut r = BufReader::new(bytes);
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("truncated PPM header".into()));
        }
        let line = line.split('#').next().unwrap_or("");
        tokens.extend(line.split_whitespace().map(str::to_string));
    }
    if tokens[0] != "P6" || tokens.len() != 4 {
        return Err(Error::Format("not a binary PPM".into()));
    }
    let parse = |t: &str| t.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM field {t:?}")));
    let (w, h, max) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if max != 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {max}")));
    }
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    if data.len() != 3 * w * h {
        return Err(Error::Format(format!("PPM payload {} bytes for {w}×{h}", data.len())));
    }
    Ok((data, h, w))
}

/// Dataset description written next to the samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: ToyConfig,
    pub count: usize,
    /// Instance-map width of the stored layouts.
    pub k_max: usize,
}

/// Generates `count` scenes (in parallel by index) into `dir`: per scene an
/// image `NNNNN.ppm`, a layout `NNNNN.gf2l` with sidecar, and the scene
/// description `NNNNN.scene.json`; plus `manifest.json`.
pub fn write_dataset(dir: &Path, cfg: &ToyConfig, seed: u64, count: usize, k_max: usize) -> Result<Manifest> {
    cfg.validate()?;
    if cfg.n_max + 1 > k_max {
        return Err(Error::BadConfig(format!("{} shapes plus background exceed layout capacity {k_max}", cfg.n_max)));
    }
    std::fs::create_dir_all(dir)?;
    (0..count).into_par_iter().try_for_each(|i| -> Result<()> {
        let scene = gen_scene(cfg, seed, i as u64)?;
        let stem = dir.join(format!("{i:05}"));
        write_ppm(&stem.with_extension("ppm"), &to_rgb8(&scene.image_tensor::<f32>()), cfg.res, cfg.res)?;
        write_layout(&stem.with_extension("gf2l"), &scene.layout::<f32>(k_max)?)?;
        std::fs::write(stem.with_extension("scene.json"), serde_json::to_vec(&scene.shapes)?)?;
        Ok(())
    })?;
    let manifest = Manifest { seed, config: cfg.clone(), count, k_max };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// One training pair.
#[derive(Clone, Debug)]
pub struct Sample<S> {
    /// `[3, R, R]`
    pub image: Tensor<S>,
    pub layout: Layout<S>,
}

/// In-memory dataset of (image, layout) pairs.
#[derive(Clone, Debug)]
pub struct Dataset<S> {
    pub res: usize,
    pub k_max: usize,
    pub samples: Vec<Sample<S>>,
}

impl<S: Scalar> Dataset<S> {
    /// Generates scenes `0..count` directly.
    pub fn generate(cfg: &ToyConfig, seed: u64, count: usize, k_max: usize) -> Result<Self> {
        cfg.validate()?;
        let samples = (0..count)
            .into_par_iter()
            .map(|i| {
                let scene = gen_scene(cfg, seed, i as u64)?;
                Ok(Sample { image: scene.image_tensor(), layout: scene.layout(k_max)? })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { res: cfg.res, k_max, samples })
    }

    /// Loads a directory written by [`write_dataset`].
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        let samples = (0..manifest.count)
            .map(|i| {
                let stem = dir.join(format!("{i:05}"));
                let (rgb, h, w) = read_ppm(&stem.with_extension("ppm"))?;
                let layout = crate::compositor::read_layout(&stem.with_extension("gf2l"))?;
                Ok(Sample { image: from_rgb8(&rgb, h, w)?, layout })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { res: manifest.config.res, k_max: manifest.k_max, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn segment_counts(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.layout.len()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_classes() {
        assert_eq!((0..8).map(color_class).collect::<Vec<_>>(), vec![1, 1, 2, 2, 3, 3, 0, 0]);
    }

    #[test]
    fn ppm_round_trip() {
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 13) as u8).collect();
        let enc = encode_ppm(&rgb, 2, 3);
        assert_eq!(decode_ppm(&enc).unwrap(), (rgb, 2, 3));
    }
}
