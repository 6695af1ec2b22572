//! Adversarial training of both stages: planning on layouts, execution on
//! (layout, image) pairs, and joint fine-tuning, with checkpointing that
//! reproduces training bit for bit.
//!
//! Every random draw of step `n` of a phase comes from a stream forked from
//! the run seed by `(phase, n)`, so a resumed run only needs the step
//! counters to continue exactly where it stopped.

pub mod checkpoint;
pub mod optim;

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compositor::{layout_noise, noisy_layout, NoiseConfig};
use crate::config::{Baseline, Config, Schedule};
use crate::discriminators::HeadSelect;
use crate::error::{Error, Result};
use crate::losses::{
    d_loss_nonsat, edge_matching_loss, g_loss_nonsat, r1_penalty, segment_fidelity_loss, semantic_matching_loss, Branch, CurveWriter,
    LazySchedule, LossReport,
};
use crate::model::{Generator, NetParams, Networks};
use crate::nn::Params;
use crate::planner::CountDistribution;
use crate::toydata::{Dataset, Sample};
use crate::{Rng, RngState, Scalar, Tape, Tensor, Var};

use checkpoint::Checkpoint;
use optim::{adam_step, ema_update, AdamConfig, AdamState};

/// A training phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Plan,
    Exec,
    Joint,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Plan => "plan",
            Phase::Exec => "exec",
            Phase::Joint => "joint",
        }
    }
}

/// Completed steps per phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub plan: usize,
    pub exec: usize,
    pub joint: usize,
}

impl Progress {
    pub fn get(&self, phase: Phase) -> usize {
        match phase {
            Phase::Plan => self.plan,
            Phase::Exec => self.exec,
            Phase::Joint => self.joint,
        }
    }

    fn bump(&mut self, phase: Phase) {
        match phase {
            Phase::Plan => self.plan += 1,
            Phase::Exec => self.exec += 1,
            Phase::Joint => self.joint += 1,
        }
    }
}

/// One completed (or extended) phase in a checkpoint's history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub phase: Phase,
    pub schedule: Schedule,
    /// Phase step counter when the entry was recorded.
    pub steps: usize,
    /// Parameter digests of the four networks at that point.
    pub digests: [u64; 4],
}

/// Everything in a checkpoint besides tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerMeta {
    pub config: Config,
    pub progress: Progress,
    pub count: CountDistribution,
    pub rng: RngState,
    /// Adam step counts by network.
    pub adam_steps: BTreeMap<String, u64>,
    pub lineage: Vec<LineageEntry>,
}

/// Parameters of one network with optimizer state and optional EMA shadow.
#[derive(Clone, Debug)]
struct Net<S: Scalar> {
    params: Params<S>,
    ema: Option<Params<S>>,
    adam: AdamState<S>,
}

impl<S: Scalar> Net<S> {
    fn new(params: Params<S>, ema: bool) -> Self {
        let adam = AdamState::new(&params);
        let ema = ema.then(|| params.clone());
        Self { params, ema, adam }
    }

    fn update(&mut self, grads: &[Tensor<S>], adam: &AdamConfig, decay: f64) -> Result<()> {
        adam_step(&mut self.params, grads, &mut self.adam, adam)?;
        if let Some(shadow) = &mut self.ema {
            ema_update(shadow, &self.params, decay)?;
        }
        Ok(())
    }
}

/// Generator outputs of one batch on a tape.
struct FakeBatch<'t, S: Scalar> {
    /// `[B, C + K, R, R]` clean layout tensors.
    s: Var<'t, S>,
    /// Same with hierarchical noise, for the layout critic.
    s_noisy: Option<Var<'t, S>>,
    /// `[B, 3, R, R]`
    x: Option<Var<'t, S>>,
    /// Per item `[k, R, R]`.
    a: Vec<Var<'t, S>>,
}

/// Owns all networks, their optimizers and the training schedule.
pub struct Trainer<S: Scalar = f32> {
    cfg: Config,
    nets: Networks,
    g1: Net<S>,
    g2: Net<S>,
    dl: Net<S>,
    di: Net<S>,
    progress: Progress,
    rng: Rng,
    lineage: Vec<LineageEntry>,
    curves: Option<PathBuf>,
}

fn batch_of<'t, S: Scalar>(tape: &'t Tape<S>, items: &[Var<'t, S>]) -> Result<Var<'t, S>> {
    let parts = items
        .iter()
        .map(|v| {
            let mut s = vec![1];
            s.extend(v.shape());
            v.reshape(&s)
        })
        .collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat(&parts, 0)
    }
}

fn stack_map<S: Scalar>(samples: &[&Sample<S>], f: impl Fn(&Sample<S>) -> Tensor<S>) -> Result<Tensor<S>> {
    Tensor::stack(&samples.iter().map(|s| f(s)).collect::<Vec<_>>())
}

fn segment_classes<S: Scalar>(sample: &Sample<S>) -> Result<(Tensor<S>, Tensor<S>)> {
    let l = &sample.layout;
    let m = Tensor::stack(&l.segments.iter().map(|s| s.m.clone()).collect::<Vec<_>>())?;
    let d = Tensor::from_f64(&[l.len(), 1], &l.segments.iter().map(|s| s.mean_depth()).collect::<Vec<_>>())?;
    Ok((m, d))
}

/// Consistency heads and weights selected by the baseline.
#[derive(Clone, Copy, Debug)]
struct Heads {
    select: HeadSelect,
    baseline: Baseline,
}

impl<S: Scalar> Trainer<S> {
    /// Fresh networks for `cfg`.
    pub fn new(cfg: Config) -> Result<Self> {
        cfg.validate()?;
        let (nets, p) = Networks::build::<S>(&cfg.model, cfg.train.seed)?;
        let NetParams { g1, g2, dl, di } = p;
        Ok(Self {
            rng: Rng::new(cfg.train.seed).fork("train"),
            cfg,
            nets,
            g1: Net::new(g1, true),
            g2: Net::new(g2, true),
            dl: Net::new(dl, false),
            di: Net::new(di, false),
            progress: Progress::default(),
            lineage: Vec::new(),
            curves: None,
        })
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    /// Adjusts the configuration of a loaded run (e.g. extends step counts).
    /// The model shape must not change.
    pub fn set_config(&mut self, cfg: Config) -> Result<()> {
        cfg.validate()?;
        if cfg.model != self.cfg.model || cfg.train.seed != self.cfg.train.seed {
            return Err(Error::BadConfig("model shape and seed are fixed once training has started".into()));
        }
        self.cfg = cfg;
        Ok(())
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    pub fn lineage(&self) -> &[LineageEntry] {
        &self.lineage
    }

    pub fn networks(&self) -> &Networks {
        &self.nets
    }

    /// Writes loss curves to `dir/<phase>.csv`.
    pub fn set_curve_dir(&mut self, dir: Option<PathBuf>) {
        self.curves = dir;
    }

    /// Live parameters of the planner, executor, layout critic and image critic.
    pub fn params(&self) -> [&Params<S>; 4] {
        [&self.g1.params, &self.g2.params, &self.dl.params, &self.di.params]
    }

    /// Moving-average planner and executor weights.
    pub fn ema(&self) -> [&Params<S>; 2] {
        [self.g1.ema.as_ref().expect("planner EMA"), self.g2.ema.as_ref().expect("executor EMA")]
    }

    pub fn digests(&self) -> [u64; 4] {
        self.params().map(Params::digest)
    }

    /// Inference handle over the moving-average weights.
    pub fn generator(&self) -> Generator<S> {
        let [g1, g2] = self.ema();
        Generator {
            config: self.cfg.model.clone(),
            planner: self.nets.planner.clone(),
            executor: self.nets.executor.clone(),
            g1: g1.clone(),
            g2: g2.clone(),
            d_image: self.nets.d_image.clone(),
            di: self.di.params.clone(),
        }
    }

    fn adam(&self) -> AdamConfig {
        let t = &self.cfg.train;
        AdamConfig { lr: t.lr, beta1: t.beta1, beta2: t.beta2, eps: t.eps }
    }

    fn noise(&self) -> NoiseConfig {
        NoiseConfig::for_resolution(self.cfg.model.res, self.cfg.train.noise_sigma)
    }

    /// Fits the per-step segment-count distribution to the dataset.
    pub fn fit_counts(&mut self, data: &Dataset<S>) -> Result<()> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let k = self.cfg.model.max_segments;
        let dist = CountDistribution::fit(&data.segment_counts(), self.cfg.model.steps, 1, k)?;
        self.nets.planner.set_count(dist)
    }

    fn check_data(&self, data: &Dataset<S>) -> Result<()> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if data.res != self.cfg.model.res || data.k_max != self.cfg.model.max_segments {
            return Err(Error::BadConfig(format!(
                "dataset at {}² with capacity {} for a model at {}² with capacity {}",
                data.res, data.k_max, self.cfg.model.res, self.cfg.model.max_segments
            )));
        }
        Ok(())
    }

    fn record_lineage(&mut self, phase: Phase) {
        let entry = LineageEntry { phase, schedule: self.cfg.train.schedule, steps: self.progress.get(phase), digests: self.digests() };
        match self.lineage.last_mut() {
            Some(last) if last.phase == phase => *last = entry,
            _ => self.lineage.push(entry),
        }
    }

    fn completed(&self, phase: Phase) -> bool {
        self.lineage.iter().any(|e| e.phase == phase && e.steps > 0)
    }

    fn curve_writer(&self, phase: Phase) -> Result<Option<CurveWriter<BufWriter<File>>>> {
        let Some(dir) = &self.curves else { return Ok(None) };
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.csv", phase.name()));
        if self.progress.get(phase) > 0 && path.exists() {
            let f = OpenOptions::new().append(true).open(&path)?;
            return Ok(Some(CurveWriter::resume(BufWriter::new(f))));
        }
        Ok(Some(CurveWriter::new(BufWriter::new(File::create(&path)?))?))
    }

    fn run_phase(&mut self, phase: Phase, target: usize, data: &Dataset<S>) -> Result<()> {
        let mut curves = self.curve_writer(phase)?;
        while self.progress.get(phase) < target {
            let step = self.progress.get(phase);
            let report = match phase {
                Phase::Plan => self.planning_step(data, step)?,
                Phase::Exec => self.execution_step(data, step)?,
                Phase::Joint => self.joint_step(data, step)?,
            };
            if !report.all_finite() {
                return Err(Error::NonFinite { op: "training step" });
            }
            if let Some(w) = &mut curves {
                w.write(step, &report)?;
            }
            self.progress.bump(phase);
            if step % 100 == 0 {
                log::info!("{} step {step}: {:?}", phase.name(), report.terms);
            }
        }
        if let Some(w) = &mut curves {
            w.flush()?;
        }
        self.record_lineage(phase);
        Ok(())
    }

    /// Trains the planner against the layout critic on dataset layouts until
    /// the configured planning step count. Only planner and layout-critic
    /// parameters change.
    pub fn train_planning(&mut self, data: &Dataset<S>) -> Result<()> {
        self.check_data(data)?;
        if self.progress.plan == 0 {
            self.fit_counts(data)?;
        }
        self.run_phase(Phase::Plan, self.cfg.train.steps.plan, data)
    }

    /// Trains the executor against the image critic on ground-truth
    /// (layout, image) pairs. Only executor and image-critic parameters change.
    pub fn train_execution(&mut self, data: &Dataset<S>) -> Result<()> {
        self.check_data(data)?;
        self.check_baseline()?;
        self.run_phase(Phase::Exec, self.cfg.train.steps.exec, data)
    }

    /// End-to-end training through both stages and both critics. Paired
    /// fine-tuning needs completed planning and execution phases; unpaired
    /// needs planning; parallel starts from fresh parameters.
    pub fn finetune_joint(&mut self, data: &Dataset<S>) -> Result<()> {
        self.check_data(data)?;
        self.check_baseline()?;
        match self.cfg.train.schedule {
            Schedule::Paired => {
                for phase in [Phase::Plan, Phase::Exec] {
                    if !self.completed(phase) {
                        return Err(Error::MissingCheckpoint(format!("paired fine-tuning needs a completed {} phase", phase.name())));
                    }
                }
            }
            Schedule::Unpaired => {
                if !self.completed(Phase::Plan) {
                    return Err(Error::MissingCheckpoint("unpaired fine-tuning needs a completed plan phase".into()));
                }
            }
            Schedule::Parallel => {
                if self.completed(Phase::Plan) || self.completed(Phase::Exec) {
                    return Err(Error::InvalidArgument("parallel training starts from fresh parameters".into()));
                }
                if self.progress.joint == 0 {
                    self.fit_counts(data)?;
                }
            }
        }
        self.run_phase(Phase::Joint, self.cfg.train.steps.joint, data)
    }

    /// All phases of the configured schedule.
    pub fn run_schedule(&mut self, data: &Dataset<S>) -> Result<()> {
        match self.cfg.train.schedule {
            Schedule::Paired => {
                self.train_planning(data)?;
                self.train_execution(data)?;
            }
            Schedule::Unpaired => self.train_planning(data)?,
            Schedule::Parallel => {}
        }
        self.finetune_joint(data)
    }

    fn check_baseline(&self) -> Result<()> {
        if self.cfg.train.baseline == Baseline::Vgg {
            return Err(Error::Unsupported("the perceptual feature-matching baseline needs a pretrained network".into()));
        }
        Ok(())
    }

    fn heads(&self, unpaired: bool) -> Heads {
        let baseline = if unpaired { Baseline::Edge } else { self.cfg.train.baseline };
        Heads {
            select: HeadSelect {
                conditional: !unpaired && baseline != Baseline::None,
                segmentation: matches!(baseline, Baseline::Sm | Baseline::Edge),
                segments: self.cfg.train.segment_fidelity && !unpaired,
            },
            baseline,
        }
    }

    fn draw(&self, rng: &mut Rng, n: usize) -> Vec<usize> {
        (0..self.cfg.train.batch).map(|_| rng.below(n)).collect()
    }

    /// Plans a batch on `tape` (with gradients when the tape records them).
    fn plan_batch<'t>(&self, tape: &'t Tape<S>, rng: &Rng, render: bool) -> Result<FakeBatch<'t, S>> {
        let (k_max, noise) = (self.cfg.model.max_segments, self.noise());
        let (planner, executor) = (&self.nets.planner, &self.nets.executor);
        let (mut s, mut s_noisy, mut x, mut a) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for i in 0..self.cfg.train.batch {
            let item = rng.fork_idx("item", i as u64);
            let plan = planner.plan_vars(tape, &self.g1.params, &item.fork("plan"))?;
            let st = plan.layout_tensor(tape, k_max)?;
            let nz = layout_noise::<S>(&st.shape(), &noise, &mut item.fork("layout_noise"))?;
            s_noisy.push(st.add(tape.constant(nz))?);
            if render {
                let k = plan.a.shape()[0];
                let n = self.cfg.model.res * self.cfg.model.res;
                let (m, mean_d) = match plan.segments {
                    Some((_, m, d)) => (m, d.reshape(&[k, n])?.mean_axis(1)?),
                    None => {
                        let c = self.cfg.model.classes;
                        (plan.class_map.reshape(&[c, n])?.mean_axis(1)?.t()?, tape.constant(Tensor::zeros(&[1, 1])))
                    }
                };
                let z = Tensor::new(&[k, self.cfg.model.z_dim], item.fork("style").normal_vec(k * self.cfg.model.z_dim, 1.0))?;
                let w = executor.map_vars(tape, &self.g2.params, tape.constant(z), mean_d, m)?;
                let (img, _) = executor.execute_vars(tape, &self.g2.params, plan.a, st, m, w, &item.fork("noise"))?;
                x.push(img);
            }
            s.push(st);
            a.push(plan.a);
        }
        Ok(FakeBatch {
            s: batch_of(tape, &s)?,
            s_noisy: Some(batch_of(tape, &s_noisy)?),
            x: if render { Some(tape.concat(&x, 0)?) } else { None },
            a,
        })
    }

    /// Renders ground-truth layouts on `tape`.
    fn render_batch<'t>(&self, tape: &'t Tape<S>, samples: &[&Sample<S>], rng: &Rng) -> Result<FakeBatch<'t, S>> {
        let executor = &self.nets.executor;
        let (mut x, mut a) = (Vec::new(), Vec::new());
        for (i, sample) in samples.iter().enumerate() {
            let item = rng.fork_idx("item", i as u64);
            let k = sample.layout.len();
            let (m, d) = segment_classes(sample)?;
            let (m, d) = (tape.constant(m), tape.constant(d));
            let z = Tensor::new(&[k, self.cfg.model.z_dim], item.fork("style").normal_vec(k * self.cfg.model.z_dim, 1.0))?;
            let w = executor.map_vars(tape, &self.g2.params, tape.constant(z), d, m)?;
            let av = tape.constant(sample.layout.a.clone());
            let (img, _) = executor.execute_vars(tape, &self.g2.params, av, tape.constant(sample.layout.tensor()), m, w, &item.fork("noise"))?;
            x.push(img);
            a.push(av);
        }
        Ok(FakeBatch { s: tape.constant(stack_map(samples, |s| s.layout.tensor())?), s_noisy: None, x: Some(tape.concat(&x, 0)?), a })
    }

    /// Layout-critic update on real layouts vs. detached fakes.
    fn layout_critic_step(&mut self, real: &Tensor<S>, fake: &Tensor<S>, step: usize, report: &mut LossReport) -> Result<()> {
        let w = self.cfg.train.losses.clone();
        let d = &self.nets.d_layout;
        let tape = Tape::new();
        let lr = d.forward(&tape, &self.dl.params, tape.constant(real.clone()))?;
        let lf = d.forward(&tape, &self.dl.params, tape.constant(fake.clone()))?;
        let adv = d_loss_nonsat(lr, lf)?;
        report.record("dl_adv", adv.item().f64(), 1.0);
        let mut loss = adv;
        let mult = LazySchedule { interval: w.r1_interval }.multiplier(step);
        if mult > 0.0 {
            let params = &self.dl.params;
            let r1 = r1_penalty(&tape, real, w.r1_gamma, |t, x| d.forward(t, params, x))?;
            report.record("dl_r1", r1.value, mult);
            loss = loss.add(r1.surrogate.scale(mult)?)?;
        }
        let grads = tape.backward(loss)?.params(&self.dl.params);
        let (adam, decay) = (self.adam(), self.cfg.train.ema_decay);
        self.dl.update(&grads, &adam, decay)
    }

    /// Consistency terms for one side of the image game.
    fn consistency<'t>(
        &self,
        tape: &'t Tape<S>,
        heads: Heads,
        seg: Option<Var<'t, S>>,
        target: Var<'t, S>,
        prefix: &str,
        report: &mut LossReport,
    ) -> Result<Option<Var<'t, S>>> {
        let w = &self.cfg.train.losses;
        let Some(seg) = seg else { return Ok(None) };
        let (name, weight, value) = match heads.baseline {
            Baseline::Sm => ("sm", w.sm, semantic_matching_loss(seg, target)?),
            Baseline::Edge => ("em", w.em, edge_matching_loss(tape, target, seg.softmax(1)?)?),
            _ => return Ok(None),
        };
        report.record(&format!("{prefix}_{name}"), value.item().f64(), weight);
        Ok(Some(value.scale(weight)?))
    }

    fn fidelity<'t>(
        &self,
        tape: &'t Tape<S>,
        segments: &[(Var<'t, S>, Vec<bool>)],
        branch: Branch,
        name: &str,
        report: &mut LossReport,
    ) -> Result<Option<Var<'t, S>>> {
        if segments.is_empty() {
            return Ok(None);
        }
        match segment_fidelity_loss(tape, segments, branch) {
            Ok(v) => {
                let weight = self.cfg.train.losses.sf;
                report.record(name, v.item().f64(), weight);
                Ok(Some(v.scale(weight)?))
            }
            Err(Error::AllSegmentsSkipped) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Image-critic update. `real_s`/`real_a` are absent in unpaired mode;
    /// there the segmentation head learns from the detached fake pairs.
    #[allow(clippy::too_many_arguments)]
    fn image_critic_step(
        &mut self,
        heads: Heads,
        real_s: Option<&Tensor<S>>,
        real_a: Option<&[Tensor<S>]>,
        real_x: &Tensor<S>,
        fake_s: &Tensor<S>,
        fake_a: &[Tensor<S>],
        fake_x: &Tensor<S>,
        step: usize,
        report: &mut LossReport,
    ) -> Result<()> {
        let w = self.cfg.train.losses.clone();
        let d = &self.nets.d_image;
        let params = &self.di.params;
        let tape = Tape::new();
        let zeros = || Tensor::zeros(fake_s.shape());
        let rs = tape.constant(real_s.cloned().unwrap_or_else(zeros));
        let ra: Vec<Var<'_, S>> = real_a.map(|a| a.iter().map(|t| tape.constant(t.clone())).collect()).unwrap_or_default();
        let fa: Vec<Var<'_, S>> = fake_a.iter().map(|t| tape.constant(t.clone())).collect();
        let fs = tape.constant(fake_s.clone());
        let real_heads = HeadSelect { segments: heads.select.segments && real_a.is_some(), ..heads.select };
        let real = d.forward(&tape, params, rs, tape.constant(real_x.clone()), &ra, real_heads)?;
        let fake = d.forward(&tape, params, fs, tape.constant(fake_x.clone()), &fa, heads.select)?;
        let adv = d_loss_nonsat(real.scene, fake.scene)?;
        report.record("di_adv", adv.item().f64(), w.adv);
        let mut loss = adv.scale(w.adv)?;
        let consistency = match real_s {
            Some(_) => self.consistency(&tape, heads, real.seg, rs.narrow(1, 0, self.cfg.model.classes)?, "di", report)?,
            None => {
                let target = fs.narrow(1, 0, self.cfg.model.classes)?;
                let h = Heads { baseline: Baseline::Sm, ..heads };
                self.consistency(&tape, h, fake.seg, target, "di_fake", report)?
            }
        };
        if let Some(c) = consistency {
            loss = loss.add(c)?;
        }
        for (segs, branch, name) in [(&real.segments, Branch::DReal, "di_sf_real"), (&fake.segments, Branch::DFake, "di_sf_fake")] {
            if let Some(v) = self.fidelity(&tape, segs, branch, name, report)? {
                loss = loss.add(v)?;
            }
        }
        let mult = LazySchedule { interval: w.r1_interval }.multiplier(step);
        if mult > 0.0 {
            let plain = HeadSelect { conditional: heads.select.conditional, segmentation: false, segments: false };
            let s_const = real_s.cloned().unwrap_or_else(zeros);
            let r1 = r1_penalty(&tape, real_x, w.r1_gamma, |t, x| Ok(d.forward(t, params, t.constant(s_const.clone()), x, &[], plain)?.scene))?;
            report.record("di_r1", r1.value, mult);
            loss = loss.add(r1.surrogate.scale(mult)?)?;
        }
        let grads = tape.backward(loss)?.params(&self.di.params);
        let (adam, decay) = (self.adam(), self.cfg.train.ema_decay);
        self.di.update(&grads, &adam, decay)
    }

    /// Generator-side image losses on `tape` for a fake batch.
    fn image_generator_loss<'t>(
        &self,
        tape: &'t Tape<S>,
        heads: Heads,
        fake: &FakeBatch<'t, S>,
        report: &mut LossReport,
    ) -> Result<Var<'t, S>> {
        let w = &self.cfg.train.losses;
        let x = fake.x.ok_or_else(|| Error::InvalidArgument("batch was not rendered".into()))?;
        let out = self.nets.d_image.forward(tape, &self.di.params, fake.s, x, &fake.a, heads.select)?;
        let adv = g_loss_nonsat(out.scene)?;
        report.record("g_adv", adv.item().f64(), w.adv);
        let mut loss = adv.scale(w.adv)?;
        let target = fake.s.narrow(1, 0, self.cfg.model.classes)?;
        if let Some(c) = self.consistency(tape, heads, out.seg, target, "g", report)? {
            loss = loss.add(c)?;
        }
        if let Some(v) = self.fidelity(tape, &out.segments, Branch::G, "g_sf", report)? {
            loss = loss.add(v)?;
        }
        Ok(loss)
    }

    fn planning_step(&mut self, data: &Dataset<S>, step: usize) -> Result<LossReport> {
        let rng = self.rng.fork_idx("plan", step as u64);
        let mut report = LossReport::default();
        let mut draw = rng.fork("real");
        let idx = self.draw(&mut draw, data.len());
        let noise = self.noise();
        let real = Tensor::stack(&idx.iter().map(|&i| noisy_layout(&data.samples[i].layout.tensor(), &noise, &mut draw)).collect::<Result<Vec<_>>>()?)?;
        let tape = Tape::new();
        tape.freeze(&self.dl.params);
        let fake = self.plan_batch(&tape, &rng.fork("fake"), false)?;
        let fake_noisy = fake.s_noisy.expect("noisy layouts");
        self.layout_critic_step(&real, &fake_noisy.value(), step, &mut report)?;
        let logits = self.nets.d_layout.forward(&tape, &self.dl.params, fake_noisy)?;
        let g = g_loss_nonsat(logits)?;
        report.record("g_layout", g.item().f64(), 1.0);
        let grads = tape.backward(g)?.params(&self.g1.params);
        let (adam, decay) = (self.adam(), self.cfg.train.ema_decay);
        self.g1.update(&grads, &adam, decay)?;
        Ok(report)
    }

    fn execution_step(&mut self, data: &Dataset<S>, step: usize) -> Result<LossReport> {
        let rng = self.rng.fork_idx("exec", step as u64);
        let mut report = LossReport::default();
        let idx = self.draw(&mut rng.fork("real"), data.len());
        let samples: Vec<&Sample<S>> = idx.iter().map(|&i| &data.samples[i]).collect();
        let heads = self.heads(false);
        let real_s = stack_map(&samples, |s| s.layout.tensor())?;
        let real_x = stack_map(&samples, |s| s.image.clone())?;
        let real_a: Vec<Tensor<S>> = samples.iter().map(|s| s.layout.a.clone()).collect();
        let tape = Tape::new();
        tape.freeze(&self.di.params);
        let fake = self.render_batch(&tape, &samples, &rng.fork("fake"))?;
        let fake_x = fake.x.expect("rendered").value();
        self.image_critic_step(heads, Some(&real_s), Some(&real_a), &real_x, &real_s, &real_a, &fake_x, step, &mut report)?;
        let g = self.image_generator_loss(&tape, heads, &fake, &mut report)?;
        let grads = tape.backward(g)?.params(&self.g2.params);
        let (adam, decay) = (self.adam(), self.cfg.train.ema_decay);
        self.g2.update(&grads, &adam, decay)?;
        Ok(report)
    }

    fn joint_step(&mut self, data: &Dataset<S>, step: usize) -> Result<LossReport> {
        let rng = self.rng.fork_idx("joint", step as u64);
        let mut report = LossReport::default();
        let unpaired = self.cfg.train.schedule == Schedule::Unpaired;
        let heads = self.heads(unpaired);
        let noise = self.noise();
        let mut draw = rng.fork("real");
        let layout_idx = self.draw(&mut draw, data.len());
        let image_idx = if unpaired { self.draw(&mut rng.fork("real_images"), data.len()) } else { layout_idx.clone() };
        let real_layouts =
            Tensor::stack(&layout_idx.iter().map(|&i| noisy_layout(&data.samples[i].layout.tensor(), &noise, &mut draw)).collect::<Result<Vec<_>>>()?)?;
        let images: Vec<&Sample<S>> = image_idx.iter().map(|&i| &data.samples[i]).collect();
        let real_x = stack_map(&images, |s| s.image.clone())?;
        let tape = Tape::new();
        tape.freeze(&self.dl.params);
        tape.freeze(&self.di.params);
        let fake = self.plan_batch(&tape, &rng.fork("fake"), true)?;
        let fake_noisy = fake.s_noisy.expect("noisy layouts");
        self.layout_critic_step(&real_layouts, &fake_noisy.value(), step, &mut report)?;
        let fake_a: Vec<Tensor<S>> = fake.a.iter().map(|a| a.value()).collect();
        let fake_x = fake.x.expect("rendered").value();
        if unpaired {
            self.image_critic_step(heads, None, None, &real_x, &fake.s.value(), &fake_a, &fake_x, step, &mut report)?;
        } else {
            let real_s = stack_map(&images, |s| s.layout.tensor())?;
            let real_a: Vec<Tensor<S>> = images.iter().map(|s| s.layout.a.clone()).collect();
            self.image_critic_step(heads, Some(&real_s), Some(&real_a), &real_x, &fake.s.value(), &fake_a, &fake_x, step, &mut report)?;
        }
        let gl = g_loss_nonsat(self.nets.d_layout.forward(&tape, &self.dl.params, fake_noisy)?)?;
        report.record("g_layout", gl.item().f64(), 1.0);
        let g = gl.add(self.image_generator_loss(&tape, heads, &fake, &mut report)?)?;
        let grads = tape.backward(g)?;
        let (g1, g2) = (grads.params(&self.g1.params), grads.params(&self.g2.params));
        let (adam, decay) = (self.adam(), self.cfg.train.ema_decay);
        self.g1.update(&g1, &adam, decay)?;
        self.g2.update(&g2, &adam, decay)?;
        Ok(report)
    }

    fn meta(&self) -> TrainerMeta {
        let adam_steps = [("g1", &self.g1), ("g2", &self.g2), ("dl", &self.dl), ("di", &self.di)]
            .into_iter()
            .map(|(n, net)| (n.to_string(), net.adam.t))
            .collect();
        TrainerMeta {
            config: self.cfg.clone(),
            progress: self.progress,
            count: self.nets.planner.config().count.clone(),
            rng: self.rng.state(),
            adam_steps,
            lineage: self.lineage.clone(),
        }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint<S>> {
        let mut ckpt = Checkpoint::new(serde_json::to_value(self.meta())?);
        for (name, net) in [("g1", &self.g1), ("g2", &self.g2), ("dl", &self.dl), ("di", &self.di)] {
            ckpt.push_params(name, &net.params);
            if let Some(ema) = &net.ema {
                ckpt.push_params(&format!("{name}.ema"), ema);
            }
            ckpt.push_like(&format!("{name}.adam_m"), &net.params, &net.adam.m);
            ckpt.push_like(&format!("{name}.adam_v"), &net.params, &net.adam.v);
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<S>) -> Result<Self> {
        let meta: TrainerMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::CorruptEntry { name: "<metadata>".into(), detail: e.to_string() })?;
        let mut t = Self::new(meta.config.clone())?;
        t.nets.planner.set_count(meta.count.clone())?;
        for (name, net) in [("g1", &mut t.g1), ("g2", &mut t.g2), ("dl", &mut t.dl), ("di", &mut t.di)] {
            ckpt.fill_params(name, &mut net.params)?;
            if let Some(ema) = &mut net.ema {
                ckpt.fill_params(&format!("{name}.ema"), ema)?;
            }
            net.adam.m = ckpt.tensors_like(&format!("{name}.adam_m"), &net.params)?;
            net.adam.v = ckpt.tensors_like(&format!("{name}.adam_v"), &net.params)?;
            net.adam.t = meta.adam_steps.get(name).copied().unwrap_or(0);
        }
        t.progress = meta.progress;
        t.rng = Rng::from_state(meta.rng);
        t.lineage = meta.lineage;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
