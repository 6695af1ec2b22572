//! The four networks, and the inference-side generator that plans, renders
//! and edits scenes with the moving-average generator weights.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compositor::{Layout, LayoutKind};
use crate::config::{Config, ModelConfig};
use crate::discriminators::{ImageDiscriminator, LayoutDiscriminator};
use crate::error::{Error, Result};
use crate::executor::{Executor, StyleLatents};
use crate::nn::Params;
use crate::planner::{CountDistribution, Planner};
use crate::trainer::checkpoint::Checkpoint;
use crate::trainer::TrainerMeta;
use crate::{Rng, Scalar, Tape, Tensor};

/// Network structure; parameters live in separate [`Params`] sets.
#[derive(Clone, Debug)]
pub struct Networks {
    pub planner: Planner,
    pub executor: Executor,
    pub d_layout: LayoutDiscriminator,
    pub d_image: ImageDiscriminator,
}

/// Freshly initialized parameters of the four networks.
#[derive(Clone, Debug)]
pub struct NetParams<S: Scalar> {
    pub g1: Params<S>,
    pub g2: Params<S>,
    pub dl: Params<S>,
    pub di: Params<S>,
}

impl Networks {
    /// Builds all networks; each draws its initial weights from its own
    /// stream of `seed`, so changing one network leaves the others' weights alone.
    pub fn build<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(Self, NetParams<S>)> {
        cfg.validate()?;
        let root = Rng::new(seed);
        let (mut g1, mut g2, mut dl, mut di) = (Params::new(), Params::new(), Params::new(), Params::new());
        let planner = Planner::new(&mut g1, &cfg.planner(), &mut root.fork("init.planner"))?;
        let executor = Executor::new(&mut g2, &cfg.executor(), &mut root.fork("init.executor"))?;
        let d_layout = LayoutDiscriminator::new(&mut dl, &cfg.discriminator(), &mut root.fork("init.d_layout"))?;
        let d_image = ImageDiscriminator::new(&mut di, &cfg.discriminator(), &mut root.fork("init.d_image"))?;
        Ok((Self { planner, executor, d_layout, d_image }, NetParams { g1, g2, dl, di }))
    }
}

/// A rendered scene: layout, style latents and image, plus the seed of its
/// per-layer noise maps (kept fixed across edits).
#[derive(Clone, Debug, PartialEq)]
pub struct Scene<S> {
    pub layout: Layout<S>,
    pub style: StyleLatents<S>,
    /// `[3, R, R]` in `[−1, 1]`.
    pub image: Tensor<S>,
    pub noise_seed: u64,
}

/// Which latent of a segment an edit changes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    Structure,
    Style,
}

impl std::str::FromStr for Which {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "structure" => Ok(Which::Structure),
            "style" => Ok(Which::Style),
            _ => Err(Error::InvalidArgument(format!("unknown latent kind {s:?} (structure|style)"))),
        }
    }
}

/// `(1 − t)·a + t·b`, returning `a` itself at `t = 0` and `b` at `t = 1`.
pub fn lerp<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, t: f64) -> Tensor<S> {
    if t == 0.0 {
        return a.clone();
    }
    if t == 1.0 {
        return b.clone();
    }
    Tensor::from_fn(a.shape(), |i| S::c((1.0 - t) * a.data()[i].f64() + t * b.data()[i].f64()))
}

/// Planning and execution networks with their (moving-average) weights.
#[derive(Clone, Debug)]
pub struct Generator<S: Scalar> {
    pub config: ModelConfig,
    pub planner: Planner,
    pub executor: Executor,
    pub g1: Params<S>,
    pub g2: Params<S>,
    /// Image critic, used as the metric feature extractor.
    pub d_image: ImageDiscriminator,
    pub di: Params<S>,
}

impl<S: Scalar> Generator<S> {
    /// Loads the moving-average generator and the image critic from a checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<S>) -> Result<Self> {
        let meta: TrainerMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::CorruptEntry { name: "<metadata>".into(), detail: e.to_string() })?;
        Self::from_parts(&meta.config, &meta.count, ckpt)
    }

    fn from_parts(cfg: &Config, count: &CountDistribution, ckpt: &Checkpoint<S>) -> Result<Self> {
        let (mut nets, mut p) = Networks::build::<S>(&cfg.model, cfg.train.seed)?;
        nets.planner.set_count(count.clone())?;
        ckpt.fill_params("g1.ema", &mut p.g1)?;
        ckpt.fill_params("g2.ema", &mut p.g2)?;
        ckpt.fill_params("di", &mut p.di)?;
        Ok(Self {
            config: cfg.model.clone(),
            planner: nets.planner,
            executor: nets.executor,
            g1: p.g1,
            g2: p.g2,
            d_image: nets.d_image,
            di: p.di,
        })
    }

    /// Raw style latents `[k, d_z]` drawn from `rng`.
    pub fn sample_style_z(&self, k: usize, rng: &mut Rng) -> Result<Tensor<S>> {
        Tensor::new(&[k, self.config.z_dim], rng.normal_vec(k * self.config.z_dim, 1.0))
    }

    /// Plans and renders the scene of `seed`.
    pub fn scene(&self, seed: u64) -> Result<Scene<S>> {
        let rng = Rng::new(seed);
        let layout = self.planner.plan_scene(&self.g1, &rng.fork("plan"))?;
        let z = self.sample_style_z(layout.len(), &mut rng.fork("style"))?;
        self.render(layout, &z, rng.fork("noise").seed())
    }

    /// Renders `layout` with raw style latents `z`.
    pub fn render(&self, layout: Layout<S>, z: &Tensor<S>, noise_seed: u64) -> Result<Scene<S>> {
        let style = self.executor.map_style_latents(&self.g2, &layout, z)?;
        let image = self.executor.execute(&self.g2, &layout, &style, &Rng::new(noise_seed))?;
        Ok(Scene { layout, style, image, noise_seed })
    }

    /// Replaces the structure or style latent of segment `i` with `z` and re-renders.
    pub fn set_latent(&self, scene: &Scene<S>, i: usize, which: Which, z: &Tensor<S>) -> Result<Scene<S>> {
        let k = scene.layout.len();
        if i >= k {
            return Err(Error::IndexOutOfRange { index: i, len: k });
        }
        match which {
            Which::Structure => {
                let layout = self.planner.regenerate_segment(&self.g1, &scene.layout, i, z)?;
                self.render(layout, &scene.style.z, scene.noise_seed)
            }
            Which::Style => {
                let zs = z.reshape(&[1, self.config.z_dim])?;
                let rows: Vec<Tensor<S>> = (0..k).map(|j| if j == i { zs.index0(0) } else { scene.style.z.index0(j) }).collect();
                self.render(scene.layout.clone(), &Tensor::stack(&rows)?, scene.noise_seed)
            }
        }
    }

    /// Current latent of segment `i`.
    pub fn latent(&self, scene: &Scene<S>, i: usize, which: Which) -> Result<Tensor<S>> {
        if i >= scene.layout.len() {
            return Err(Error::IndexOutOfRange { index: i, len: scene.layout.len() });
        }
        Ok(match which {
            Which::Structure => scene.layout.segments[i].z.clone(),
            Which::Style => scene.style.z.index0(i),
        })
    }

    /// Moves segment `i`'s latent towards `target` by `t ∈ [0, 1]`.
    pub fn interpolate(&self, scene: &Scene<S>, i: usize, which: Which, target: &Tensor<S>, t: f64) -> Result<Scene<S>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("interpolation weight {t} outside [0, 1]")));
        }
        let current = self.latent(scene, i, which)?;
        if target.shape() != current.shape() {
            return Err(Error::InvalidArgument(format!("target latent {:?}, expected {:?}", target.shape(), current.shape())));
        }
        if t == 0.0 {
            return Ok(scene.clone());
        }
        self.set_latent(scene, i, which, &lerp(&current, target, t))
    }

    /// Appends one planning step conditioned on the scene; new segments get
    /// fresh style latents.
    pub fn add_segments(&self, scene: &Scene<S>, rng: &Rng) -> Result<Scene<S>> {
        let layout = self.planner.add_segments(&self.g1, &scene.layout, &rng.fork("plan"))?;
        let extra = self.sample_style_z(layout.len() - scene.layout.len(), &mut rng.fork("style"))?;
        let mut rows: Vec<Tensor<S>> = (0..scene.layout.len()).map(|j| scene.style.z.index0(j)).collect();
        rows.extend((0..extra.shape()[0]).map(|j| extra.index0(j)));
        self.render(layout, &Tensor::stack(&rows)?, scene.noise_seed)
    }

    /// Drops segment `i` and re-renders what the remaining segments reveal.
    pub fn delete_segment(&self, scene: &Scene<S>, i: usize) -> Result<Scene<S>> {
        let k = scene.layout.len();
        if i >= k {
            return Err(Error::IndexOutOfRange { index: i, len: k });
        }
        if k == 1 || scene.layout.kind == LayoutKind::Dense {
            return Err(Error::InvalidArgument("cannot delete the last segment".into()));
        }
        let layout = scene.layout.without(i)?;
        let rows: Vec<Tensor<S>> = (0..k).filter(|&j| j != i).map(|j| scene.style.z.index0(j)).collect();
        self.render(layout, &Tensor::stack(&rows)?, scene.noise_seed)
    }

    /// Image-critic stem features `[B, F]` of images `[B, 3, R, R]`.
    pub fn features(&self, images: &Tensor<S>) -> Result<Tensor<S>> {
        let tape = Tape::inference();
        Ok(self.d_image.image_features(&tape, &self.di, tape.constant(images.clone()))?.value())
    }
}
