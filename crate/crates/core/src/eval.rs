//! Evaluation of a trained generator: layout-image consistency, style
//! diversity, precision/recall, disentanglement and controllability.

use serde::{Deserialize, Serialize};

use crate::compositor::Layout;
use crate::error::{Error, Result};
use crate::metrics::{
    ari, controllability_rho, dci_scores, diversity_proxy, knn_precision_recall, miou_pacc, ControlProbe, EvalReport, SegScores, MIN_PROBES,
};
use crate::model::{Generator, Scene, Which};
use crate::toydata::{oracle_segment, Dataset};
use crate::{Rng, Scalar, Tensor};

/// Sample budgets of an evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
    /// Dataset layouts rendered for the consistency scores.
    pub layouts: usize,
    /// Layouts used for diversity, each rendered `diversity_n` times.
    pub diversity_layouts: usize,
    pub diversity_n: usize,
    /// Real and generated images for precision/recall.
    pub pr_samples: usize,
    pub knn_k: usize,
    /// Generated scenes whose segments feed the DCI regressors.
    pub dci_scenes: usize,
    /// Base scenes for controllability, each probed `probes_per_scene` times.
    pub probe_scenes: usize,
    pub probes_per_scene: usize,
    /// Latent perturbation scale of a probe.
    pub probe_sigma: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            layouts: 64,
            diversity_layouts: 8,
            diversity_n: 20,
            pr_samples: 64,
            knn_k: 3,
            dci_scenes: 64,
            probe_scenes: 4,
            probes_per_scene: 40,
            probe_sigma: 1.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layouts == 0 || self.diversity_layouts == 0 || self.dci_scenes < 2 || self.probe_scenes == 0 {
            return Err(Error::BadConfig("evaluation needs at least one layout, one diversity layout, two DCI scenes and one probe scene".into()));
        }
        if self.diversity_n < 2 {
            return Err(Error::BadConfig("diversity needs at least 2 samples per layout".into()));
        }
        if self.probes_per_scene < MIN_PROBES {
            return Err(Error::TooFewProbes { got: self.probes_per_scene, min: MIN_PROBES });
        }
        if self.pr_samples <= self.knn_k {
            return Err(Error::BadConfig(format!("precision/recall needs more than k = {} samples", self.knn_k)));
        }
        Ok(())
    }
}

/// Per-pixel class and instance agreement of the rendered image with its
/// input layout, read back through the palette oracle.
pub fn consistency<S: Scalar>(layout: &Layout<S>, image: &Tensor<S>) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>)> {
    let seg = oracle_segment(image);
    Ok((seg.classes, layout.class_ids(), seg.instances, layout.instance_ids()))
}

/// Class scores and mean ARI of rendering `layouts` with random styles.
pub fn consistency_scores<S: Scalar>(gen: &Generator<S>, layouts: &[&Layout<S>], seed: u64) -> Result<(SegScores, f64)> {
    let (mut pred, mut gt, mut aris) = (Vec::new(), Vec::new(), Vec::new());
    let rng = Rng::new(seed).fork("consistency");
    for (i, layout) in layouts.iter().enumerate() {
        let item = rng.fork_idx("layout", i as u64);
        let z = gen.sample_style_z(layout.len(), &mut item.fork("style"))?;
        let scene = gen.render((*layout).clone(), &z, item.fork("noise").seed())?;
        let (p, g, pi, gi) = consistency(layout, &scene.image)?;
        aris.push(ari(&pi, &gi)?);
        pred.extend(p);
        gt.extend(g);
    }
    Ok((miou_pacc(&pred, &gt, gen.config.classes)?, aris.iter().sum::<f64>() / aris.len().max(1) as f64))
}

fn features_of<S: Scalar>(gen: &Generator<S>, images: &[Tensor<S>]) -> Result<Vec<Vec<f64>>> {
    let f = gen.features(&Tensor::stack(images)?)?;
    Ok((0..f.shape()[0]).map(|i| f.index0(i).to_f64_vec()).collect())
}

/// Mean diversity of `n` styles per layout, and of `n` renders that share
/// one style and differ only in noise seed (the floor of the proxy).
pub fn diversity_scores<S: Scalar>(gen: &Generator<S>, layouts: &[&Layout<S>], n: usize, seed: u64) -> Result<(f64, f64)> {
    let rng = Rng::new(seed).fork("diversity");
    let (mut div, mut floor) = (Vec::new(), Vec::new());
    for (i, layout) in layouts.iter().enumerate() {
        let item = rng.fork_idx("layout", i as u64);
        let mut styled = Vec::with_capacity(n);
        let mut dup = Vec::with_capacity(n);
        let z0 = gen.sample_style_z(layout.len(), &mut item.fork("shared"))?;
        for j in 0..n {
            let s = item.fork_idx("sample", j as u64);
            let z = gen.sample_style_z(layout.len(), &mut s.fork("style"))?;
            styled.push(gen.render((*layout).clone(), &z, s.fork("noise").seed())?.image);
            dup.push(gen.render((*layout).clone(), &z0, s.fork("noise").seed())?.image);
        }
        div.push(diversity_proxy(&features_of(gen, &styled)?)?);
        floor.push(diversity_proxy(&features_of(gen, &dup)?)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok((mean(&div), mean(&floor)))
}

/// Per-segment region properties: mean RGB, centroid and area fraction
/// over the pixels the segment wins.
pub fn segment_properties<S: Scalar>(scene: &Scene<S>) -> Vec<Vec<f64>> {
    let ids = scene.layout.instance_ids();
    let n = ids.len();
    let r = scene.layout.res();
    let img = scene.image.data();
    let mut acc = vec![[0.0f64; 6]; scene.layout.len()];
    for (p, &i) in ids.iter().enumerate() {
        let a = &mut acc[i];
        for c in 0..3 {
            a[c] += img[c * n + p].f64();
        }
        a[3] += (p / r) as f64 / r as f64;
        a[4] += (p % r) as f64 / r as f64;
        a[5] += 1.0;
    }
    acc.iter()
        .map(|a| {
            let area = a[5].max(1.0);
            vec![a[0] / area, a[1] / area, a[2] / area, a[3] / area, a[4] / area, a[5] / n as f64]
        })
        .collect()
}

/// Perturbs random segments' structure or style latents of `base`, one at a
/// time, and records the property change of every segment.
pub fn control_probes<S: Scalar>(gen: &Generator<S>, base: &Scene<S>, count: usize, sigma: f64, rng: &Rng) -> Result<Vec<ControlProbe>> {
    let before = segment_properties(base);
    let k = base.layout.len();
    (0..count)
        .map(|j| {
            let mut r = rng.fork_idx("probe", j as u64);
            let source = r.below(k);
            let which = if j % 2 == 0 { Which::Style } else { Which::Structure };
            let z = gen.latent(base, source, which)?;
            let noise: Vec<f64> = r.normal_vec(z.numel(), sigma);
            let moved = Tensor::from_fn(z.shape(), |i| S::c(z.data()[i].f64() + noise[i]));
            let after = segment_properties(&gen.set_latent(base, source, which, &moved)?);
            let deltas = before.iter().zip(&after).map(|(b, a)| b.iter().zip(a).map(|(x, y)| y - x).collect()).collect();
            Ok(ControlProbe { source, deltas })
        })
        .collect()
}

/// Full report on `data` (typically a held-out split).
pub fn evaluate<S: Scalar>(gen: &Generator<S>, data: &Dataset<S>, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pick = |n: usize| -> Vec<&Layout<S>> { (0..n).map(|i| &data.samples[i % data.len()].layout).collect() };
    let rng = Rng::new(cfg.seed);
    let layouts = pick(cfg.layouts);
    let (seg, ari_mean) = consistency_scores(gen, &layouts, cfg.seed)?;

    let (diversity, diversity_duplicates) = diversity_scores(gen, &pick(cfg.diversity_layouts), cfg.diversity_n, cfg.seed)?;

    let srng = rng.fork("scenes");
    let generated: Vec<Scene<S>> = (0..cfg.pr_samples.max(cfg.dci_scenes)).map(|i| gen.scene(srng.fork_idx("scene", i as u64).seed())).collect::<Result<_>>()?;
    let real: Vec<Tensor<S>> = (0..cfg.pr_samples).map(|i| data.samples[i % data.len()].image.clone()).collect();
    let fake: Vec<Tensor<S>> = generated[..cfg.pr_samples].iter().map(|s| s.image.clone()).collect();
    let (precision, recall) = knn_precision_recall(&features_of(gen, &real)?, &features_of(gen, &fake)?, cfg.knn_k)?;

    let (mut latents, mut attributes) = (Vec::new(), Vec::new());
    for scene in &generated[..cfg.dci_scenes] {
        for (i, props) in segment_properties(scene).into_iter().enumerate() {
            let mut l = scene.layout.segments[i].z.to_f64_vec();
            l.extend(scene.style.z.index0(i).to_f64_vec());
            latents.push(l);
            attributes.push(props);
        }
    }
    let dci = dci_scores(&latents, &attributes)?;

    let prng = rng.fork("probes");
    let (mut object, mut property, mut probes) = (Vec::new(), Vec::new(), 0);
    for i in 0..cfg.probe_scenes {
        let base = gen.scene(prng.fork_idx("base", i as u64).seed())?;
        let p = control_probes(gen, &base, cfg.probes_per_scene, cfg.probe_sigma, &prng.fork_idx("scene", i as u64))?;
        probes += p.len();
        let (o, q) = controllability_rho(&p)?;
        object.push(o);
        property.push(q);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;

    let report = EvalReport {
        miou: seg.miou,
        pacc: seg.pacc,
        ari: ari_mean,
        diversity,
        diversity_duplicates,
        precision,
        recall,
        dci,
        object_rho: mean(&object),
        property_rho: mean(&property),
        feature_space: "image critic stem features".into(),
        samples: cfg.layouts,
        probes,
        seed: cfg.seed,
        per_class: seg.per_class,
    };
    report.validate()?;
    Ok(report)
}
