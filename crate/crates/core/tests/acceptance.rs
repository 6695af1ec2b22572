//! Acceptance criteria, one PASS/FAIL line each. Arguments select criteria
//! by substring; the process exits non-zero when any selected one fails.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use common::{check, probe, randn, tiny_config, GradReport};
use gf2_core::attention::{AttentionBlock, AttentionConfig};
use gf2_core::compositor::{composite, composite_vars, hierarchical_noise, NoiseConfig, SegmentDraft};
use gf2_core::config::{Baseline, Config, PhaseSteps, Schedule};
use gf2_core::discriminators::{DiscriminatorConfig, HeadSelect, ImageDiscriminator, LayoutDiscriminator};
use gf2_core::eval::{consistency_scores, diversity_scores};
use gf2_core::executor::{Executor, ExecutorConfig, GateMode};
use gf2_core::losses::{d_loss_nonsat, edge_matching_soft, g_loss_nonsat, r1_penalty, segment_fidelity_loss, semantic_matching_loss, soft_edges, Branch};
use gf2_core::metrics::{ari, miou_pacc};
use gf2_core::model::{Generator, Which};
use gf2_core::nn::Params;
use gf2_core::planner::{levels_for, CountDistribution, Planner, PlannerConfig};
use gf2_core::toydata::Dataset;
use gf2_core::trainer::Trainer;
use gf2_core::visuals::export_visuals;
use gf2_core::{Rng, Tape, Tensor};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

const GRAD_TOL: f64 = 1e-3;
const INSTANCES: u64 = 10;

/// Worst relative error over `INSTANCES` random instances of one computation.
struct Suite {
    worst: Vec<(String, f64)>,
}

impl Suite {
    fn record(&mut self, name: &str, reports: impl IntoIterator<Item = GradReport>) {
        let worst = reports.into_iter().map(|r| r.worst()).fold(0.0, f64::max);
        self.worst.push((name.to_string(), worst));
    }
}

fn positive(shape: &[usize], rng: &mut Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| (0.5 + 1.5 * rng.uniform()) as f32)
}

fn primitives(suite: &mut Suite) {
    let none = Params::<f32>::new();
    macro_rules! unary {
        ($name:literal, $gen:expr, $body:expr) => {{
            let reports = (0..INSTANCES).map(|seed| {
                let mut rng = Rng::new(seed);
                let x: Tensor<f32> = $gen(&[3, 4], &mut rng);
                check(&[x], &none, 1e-3, seed, $body)
            });
            suite.record($name, reports.collect::<Vec<_>>());
        }};
    }
    unary!("scale", randn, probe!(; |t, p, v| v[0].scale(-1.7)));
    unary!("neg", randn, probe!(; |t, p, v| v[0].neg()));
    unary!("add_scalar", randn, probe!(; |t, p, v| v[0].add_scalar(0.3)?.square()));
    unary!("exp", randn, probe!(; |t, p, v| v[0].exp()));
    unary!("ln", positive, probe!(; |t, p, v| v[0].ln()));
    unary!("sigmoid", randn, probe!(; |t, p, v| v[0].sigmoid()));
    unary!("tanh", randn, probe!(; |t, p, v| v[0].tanh()));
    unary!("leaky_relu", randn, probe!(; |t, p, v| v[0].leaky_relu(0.2)));
    unary!("softplus", randn, probe!(; |t, p, v| v[0].softplus()));
    unary!("sqrt", positive, probe!(; |t, p, v| v[0].sqrt()));
    unary!("square", randn, probe!(; |t, p, v| v[0].square()));
    unary!("abs", randn, probe!(; |t, p, v| v[0].abs()));
    unary!("clamp_min", randn, probe!(; |t, p, v| v[0].clamp_min(0.1)));
    unary!("sum", randn, probe!(; |t, p, v| v[0].sum()));
    unary!("mean", randn, probe!(; |t, p, v| v[0].mean()));
    unary!("sum_axis", randn, probe!(; |t, p, v| v[0].sum_axis(1)));
    unary!("mean_axis", randn, probe!(; |t, p, v| v[0].mean_axis(0)));
    unary!("softmax", randn, probe!(; |t, p, v| v[0].softmax(1)));
    unary!("log_softmax", randn, probe!(; |t, p, v| v[0].log_softmax(0)));
    unary!("layernorm", randn, probe!(; |t, p, v| v[0].layernorm(1, 1e-5)));
    unary!("transpose", randn, probe!(; |t, p, v| v[0].t()?.mul(v[0].t()?)));
    unary!("reshape", randn, probe!(; |t, p, v| v[0].reshape(&[2, 6])?.softmax(1)));
    unary!("narrow", randn, probe!(; |t, p, v| v[0].narrow(1, 1, 2)?.square()));
    unary!("concat", randn, probe!(; |t, p, v| t.concat(&[v[0].square()?, v[0].narrow(0, 0, 1)?], 0)));

    macro_rules! binary {
        ($name:literal, $a:expr, $b:expr, $body:expr) => {{
            let reports = (0..INSTANCES).map(|seed| {
                let mut rng = Rng::new(100 + seed);
                let a: Tensor<f32> = randn(&$a, &mut rng);
                let b: Tensor<f32> = if $name == "div" { positive(&$b, &mut rng) } else { randn(&$b, &mut rng) };
                check(&[a, b], &none, 1e-3, seed, $body)
            });
            suite.record($name, reports.collect::<Vec<_>>());
        }};
    }
    binary!("add (broadcast)", [3, 4], [1, 4], probe!(; |t, p, v| v[0].add(v[1])?.square()));
    binary!("sub (broadcast)", [3, 4], [3, 1], probe!(; |t, p, v| v[0].sub(v[1])?.square()));
    binary!("mul (broadcast)", [2, 3, 4], [3, 1], probe!(; |t, p, v| v[0].mul(v[1])));
    binary!("div (broadcast)", [3, 4], [1, 4], probe!(; |t, p, v| v[0].div(v[1])));
    binary!("div", [3, 4], [3, 4], probe!(; |t, p, v| v[0].div(v[1])));
    binary!("matmul", [3, 4], [4, 2], probe!(; |t, p, v| v[0].matmul(v[1])));
    binary!("matmul_t", [3, 4], [5, 4], probe!(; |t, p, v| v[0].matmul_t(v[1])));

    let reports = (0..INSTANCES).map(|seed| {
        let mut rng = Rng::new(200 + seed);
        let (stride, pad) = (1 + seed as usize % 2, seed as usize % 2);
        let inputs = vec![randn::<f32>(&[2, 3, 5, 5], &mut rng), randn(&[4, 3, 3, 3], &mut rng)];
        check(&inputs, &none, 1e-3, seed, probe!(stride: usize = stride, pad: usize = pad; |t, p, v| v[0].conv2d(v[1], stride, pad)))
    });
    suite.record("conv2d", reports.collect::<Vec<_>>());
    let reports = (0..INSTANCES).map(|seed| {
        let mut rng = Rng::new(300 + seed);
        let inputs = vec![randn::<f32>(&[2, 3, 4, 4], &mut rng)];
        check(&inputs, &none, 1e-3, seed, probe!(; |t, p, v| {
            let pooled = v[0].avg_pool(2)?;
            t.concat(&[pooled.upsample_nearest(2)?.square()?, v[0].permute(&[0, 2, 3, 1])?.permute(&[0, 3, 1, 2])?], 1)
        }))
    });
    suite.record("avg_pool, upsample_nearest, permute", reports.collect::<Vec<_>>());
}

fn blocks(suite: &mut Suite) {
    let reports = (0..INSTANCES).map(|seed| {
        let c = AttentionConfig { channels: 4, cond_channels: 2, latent_dim: 3, dim: 4, heads: 1 + seed as usize % 2, pos_dim: 4, slots: if seed % 3 == 0 { 4 } else { 0 } };
        let mut params = Params::new();
        let block = AttentionBlock::new(&mut params, "att", &c, &mut Rng::new(100 + seed));
        let mut rng = Rng::new(200 + seed);
        let inputs = vec![randn::<f32>(&[6, 4], &mut rng), randn(&[6, 2], &mut rng), randn(&[3, 3], &mut rng)];
        check(&inputs, &params, 1e-3, seed, probe!(block: AttentionBlock = block.clone(); |tape, params, v| {
            let (y, att) = block.forward(tape, params, v[0], Some(v[1]), (2, 3), v[2])?;
            tape.concat(&[y, att.weights], 1)
        }))
    });
    suite.record("attention block", reports.collect::<Vec<_>>());

    let pcfg = PlannerConfig {
        res: 8,
        classes: 3,
        steps: 1,
        channels: vec![4; levels_for(8).unwrap()],
        z_dim: 4,
        u_dim: 4,
        mapping_depth: 2,
        attn_dim: 4,
        heads: 1,
        pos_dim: 4,
        depth_dim: 4,
        slots: 0,
        max_segments: 8,
        count: CountDistribution { mu: 2.0, sigma: 0.0, k_min: 1, k_max: 4 },
    };
    let reports = (0..INSTANCES).map(|seed| {
        let mut params = Params::new();
        let planner = Planner::new(&mut params, &pcfg, &mut Rng::new(20 + seed)).unwrap();
        let mut rng = Rng::new(100 + seed);
        let k = 1 + seed as usize % 3;
        let prev = Tensor::from_fn(&[3, 8, 8], |_| rng.uniform() as f32);
        let inputs = vec![randn::<f32>(&[k, 4], &mut rng), prev];
        check(&inputs, &params, 1e-3, seed, probe!(planner: Planner = planner, k: usize = k; |tape, params, v| {
            let s = planner.step_vars(tape, params, v[0], v[1])?;
            tape.concat(&[s.p.reshape(&[k, 64])?.scale(64.0)?, s.d.reshape(&[k, 64])?, s.m], 1)
        }))
    });
    suite.record("planner step", reports.collect::<Vec<_>>());
    let reports = (0..INSTANCES).map(|seed| {
        let mut params = Params::new();
        let planner = Planner::new(&mut params, &pcfg, &mut Rng::new(10 + seed)).unwrap();
        let inputs = vec![randn::<f32>(&[3, 4], &mut Rng::new(seed))];
        check(&inputs, &params, 1e-3, seed, probe!(planner: Planner = planner; |tape, params, v| planner.map_vars(tape, params, v[0])))
    });
    suite.record("structure mapping", reports.collect::<Vec<_>>());

    let reports = (0..INSTANCES).map(|seed| {
        let mut rng = Rng::new(seed);
        let k = 1 + seed as usize % 4;
        let p = Tensor::from_fn(&[k, 3, 3], |_| 0.05 + rng.uniform() as f32);
        let inputs = vec![p, randn::<f32>(&[k, 3, 3], &mut rng), randn(&[k, 2], &mut rng)];
        check(&inputs, &Params::new(), 1e-3, seed, probe!(k: usize = k; |tape, params, v| {
            let out = composite_vars(v[0], v[1], v[2].softmax(1)?)?;
            tape.concat(&[out.a.reshape(&[k * 9])?, out.class_map.reshape(&[18])?, out.depth_map.reshape(&[9])?], 0)
        }))
    });
    suite.record("compositor", reports.collect::<Vec<_>>());

    let ecfg = |gate| ExecutorConfig { res: 8, classes: 3, max_segments: 4, channels: vec![4, 4], z_dim: 4, w_dim: 4, mapping_depth: 2, gate, gate_dim: 4, noise: true };
    let reports = (0..INSTANCES).map(|seed| {
        let mut params = Params::new();
        let ex = Executor::new(&mut params, &ecfg(GateMode::ALL[seed as usize % 5]), &mut Rng::new(20 + seed)).unwrap();
        let mut rng = Rng::new(100 + seed);
        let k = 1 + seed as usize % 3;
        let inputs = vec![
            randn::<f32>(&[k, 8, 8], &mut rng),
            Tensor::from_fn(&[7, 8, 8], |_| rng.uniform() as f32),
            Tensor::from_fn(&[k, 3], |_| rng.uniform() as f32),
            randn(&[k, 4], &mut rng),
        ];
        check(&inputs, &params, 1e-3, seed, probe!(ex: Executor = ex, seed: u64 = seed; |tape, params, v| {
            let (img, trace) = ex.execute_vars(tape, params, v[0].softmax(0)?, v[1], v[2], v[3], &Rng::new(seed))?;
            let mut parts = vec![img.reshape(&[192, 1])?];
            for t in &trace {
                let n: usize = t.weights.shape().iter().product();
                parts.push(t.weights.reshape(&[n, 1])?);
            }
            tape.concat(&parts, 0)
        }))
    });
    suite.record("executor layers (all gates)", reports.collect::<Vec<_>>());
    let reports = (0..INSTANCES).map(|seed| {
        let mut params = Params::new();
        let ex = Executor::new(&mut params, &ecfg(GateMode::Full), &mut Rng::new(10 + seed)).unwrap();
        let mut rng = Rng::new(seed);
        let inputs = vec![randn::<f32>(&[3, 4], &mut rng), randn(&[3, 1], &mut rng), Tensor::from_fn(&[3, 3], |_| rng.uniform() as f32)];
        check(&inputs, &params, 1e-3, seed, probe!(ex: Executor = ex; |tape, params, v| ex.map_vars(tape, params, v[0], v[1], v[2])))
    });
    suite.record("style mapping", reports.collect::<Vec<_>>());

    let dcfg = DiscriminatorConfig { res: 8, classes: 3, max_segments: 4, stem: [4, 4, 4], segment_hidden: 4 };
    let reports = (0..INSTANCES).map(|seed| {
        let mut params = Params::new();
        let d = LayoutDiscriminator::new(&mut params, &dcfg, &mut Rng::new(20 + seed)).unwrap();
        let inputs = vec![randn::<f32>(&[2, 7, 8, 8], &mut Rng::new(seed))];
        check(&inputs, &params, 1e-3, seed, probe!(d: LayoutDiscriminator = d; |tape, params, v| d.forward(tape, params, v[0])))
    });
    suite.record("layout critic", reports.collect::<Vec<_>>());
    const HEADS: HeadSelect = HeadSelect { conditional: true, segmentation: true, segments: true };
    let reports = (0..INSTANCES).map(|seed| {
        let mut params = Params::new();
        let d = ImageDiscriminator::new(&mut params, &dcfg, &mut Rng::new(30 + seed)).unwrap();
        let mut rng = Rng::new(seed);
        let k = 1 + seed as usize % 4;
        let inputs = vec![
            Tensor::from_fn(&[1, 7, 8, 8], |_| rng.uniform() as f32),
            Tensor::from_fn(&[1, 3, 8, 8], |_| (2.0 * rng.uniform() - 1.0) as f32),
            randn(&[k, 8, 8], &mut rng),
        ];
        check(&inputs, &params, 1e-3, seed, probe!(d: ImageDiscriminator = d; |tape, params, v| {
            let out = d.forward(tape, params, v[0], v[1], &[v[2].softmax(0)?], HEADS)?;
            let seg = out.seg.expect("segmentation head");
            tape.concat(&[out.scene.reshape(&[1])?, seg.reshape(&[192])?, out.segments[0].0], 0)
        }))
    });
    suite.record("image critic", reports.collect::<Vec<_>>());
}

/// R1's parameter gradient against central differences of its value.
fn r1_report(seed: u64) -> GradReport {
    let mut rng = Rng::new(400 + seed);
    let mut params = Params::<f64>::new();
    let w = params.add("w", Tensor::randn(&[5, 4], 0.5, &mut rng));
    let v = params.add("v", Tensor::randn(&[4, 1], 0.5, &mut rng));
    let x: Tensor<f64> = Tensor::randn(&[3, 5], 0.5, &mut rng);
    let gamma = 10.0;
    let value = |p: &Params<f64>| -> f64 {
        let tape = Tape::new();
        r1_penalty(&tape, &x, gamma, |t, x| x.matmul(t.param(p, w))?.tanh()?.matmul(t.param(p, v))).unwrap().value
    };
    let tape = Tape::new();
    let r1 = r1_penalty(&tape, &x, gamma, |t, x| x.matmul(t.param(&params, w))?.tanh()?.matmul(t.param(&params, v))).unwrap();
    let grads = tape.backward(r1.surrogate).unwrap();
    let auto = grads.params(&params);
    let mut entries = Vec::new();
    for (k, id) in [w, v].into_iter().enumerate() {
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for c in 0..params.get(id).numel() {
            let x0 = params.get(id).data()[c];
            let h = 1e-5;
            params.get_mut(id).data_mut()[c] = x0 + h;
            let up = value(&params);
            params.get_mut(id).data_mut()[c] = x0 - h;
            let down = value(&params);
            params.get_mut(id).data_mut()[c] = x0;
            n.push((up - down) / (2.0 * h));
            a.push(auto[k].data()[c]);
        }
        entries.push((params.name(id).to_string(), common::rel_err(&a, &n)));
    }
    GradReport { entries }
}

fn losses(suite: &mut Suite) {
    let none = Params::<f32>::new();
    let reports = (0..INSTANCES).map(|seed| {
        let mut rng = Rng::new(seed);
        let inputs = vec![Tensor::randn(&[6], 3.0, &mut rng), Tensor::randn(&[4], 3.0, &mut rng)];
        check(&inputs, &none, 1e-3, seed, probe!(; |tape, params, v| {
            tape.concat(&[g_loss_nonsat(v[1])?.reshape(&[1])?, d_loss_nonsat(v[0], v[1])?.reshape(&[1])?], 0)
        }))
    });
    suite.record("adversarial losses", reports.collect::<Vec<_>>());
    suite.record("R1 penalty", (0..INSTANCES).map(r1_report).collect::<Vec<_>>());
    let reports = (0..INSTANCES).map(|seed| {
        let mut rng = Rng::new(seed);
        let inputs = vec![Tensor::randn(&[2, 3, 4, 4], 2.0, &mut rng), randn(&[2, 3, 4, 4], &mut rng)];
        check(&inputs, &none, 1e-3, seed, probe!(; |tape, params, v| semantic_matching_loss(v[0], v[1].softmax(1)?)))
    });
    suite.record("semantic matching", reports.collect::<Vec<_>>());
    let reports = (0..INSTANCES).map(|seed| {
        let mut rng = Rng::new(seed);
        let inputs = vec![Tensor::randn(&[4], 2.0, &mut rng), Tensor::randn(&[3], 2.0, &mut rng)];
        check(&inputs, &none, 1e-3, seed, probe!(; |tape, params, v| {
            let segs = vec![(v[0], vec![false, true, false, false]), (v[1], vec![false; 3])];
            let parts: Vec<_> = [Branch::DReal, Branch::DFake, Branch::G]
                .into_iter()
                .map(|b| segment_fidelity_loss(tape, &segs, b).and_then(|l| l.reshape(&[1])))
                .collect::<gf2_core::Result<_>>()?;
            tape.concat(&parts, 0)
        }))
    });
    suite.record("segment fidelity", reports.collect::<Vec<_>>());
    let reports = (0..INSTANCES).map(|seed| {
        let mut rng = Rng::new(seed);
        let inputs = vec![Tensor::randn(&[1, 3, 5, 5], 2.0, &mut rng), Tensor::randn(&[1, 3, 5, 5], 2.0, &mut rng)];
        check(&inputs, &none, 1e-3, seed, probe!(; |tape, params, v| {
            let (a, b) = (v[0].softmax(1)?, v[1].softmax(1)?);
            tape.concat(&[edge_matching_soft(tape, a, b)?.reshape(&[1])?, soft_edges(tape, a)?.reshape(&[25])?], 0)
        }))
    });
    suite.record("edge matching", reports.collect::<Vec<_>>());
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut suite = Suite { worst: Vec::new() };
    primitives(&mut suite);
    blocks(&mut suite);
    losses(&mut suite);
    let secs = start.elapsed().as_secs_f64();
    let failing: Vec<String> = suite.worst.iter().filter(|(_, e)| !(*e <= GRAD_TOL)).map(|(n, e)| format!("{n} {e:.2e}")).collect();
    let worst = suite.worst.iter().map(|e| e.1).fold(0.0, f64::max);
    ensure(failing.is_empty(), || format!("relative error above {GRAD_TOL:.0e}: {}", failing.join(", ")))?;
    ensure(secs <= 120.0, || format!("took {secs:.0}s > 120s"))?;
    Ok(format!("{} computations x {INSTANCES} instances, worst rel. err {worst:.2e}, {secs:.1}s", suite.worst.len()))
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn random_segments(k: usize, side: usize, classes: usize, rng: &mut Rng) -> Vec<SegmentDraft<f64>> {
    let n = side * side;
    (0..k)
        .map(|_| {
            let mut p = softmax(&(0..n).map(|_| 2.0 * rng.normal()).collect::<Vec<_>>());
            if rng.below(3) == 0 {
                p[rng.below(n)] = 0.0;
                let z: f64 = p.iter().sum();
                p.iter_mut().for_each(|v| *v /= z);
            }
            let d: Vec<f64> = (0..n).map(|_| 3.0 * rng.normal()).collect();
            let m = softmax(&(0..classes).map(|_| rng.normal()).collect::<Vec<_>>());
            SegmentDraft {
                p: Tensor::from_f64(&[side, side], &p).unwrap(),
                m: Tensor::from_f64(&[classes], &m).unwrap(),
                d: Tensor::from_f64(&[side, side], &d).unwrap(),
                z: Tensor::zeros(&[0]),
                u: Tensor::zeros(&[0]),
                birth_step: 1,
            }
        })
        .collect()
}

fn composite_invariants() -> Outcome {
    let (mut worst_norm, mut worst_shift, mut worst_perm, mut dominance) = (0.0f64, 0.0f64, 0.0f64, 0usize);
    for set in 0..1000u64 {
        let mut rng = Rng::new(set);
        let k = 1 + rng.below(6);
        let side = 4;
        let segs = random_segments(k, side, 3, &mut rng);
        let l = composite(segs.clone(), k).map_err(|e| e.to_string())?;
        for y in 0..side {
            for x in 0..side {
                let total: f64 = (0..k).map(|i| l.a.at(&[i, y, x])).sum();
                worst_norm = worst_norm.max((total - 1.0).abs());
                for i in 0..k {
                    for j in 0..k {
                        let (si, sj) = (&segs[i], &segs[j]);
                        if si.d.at(&[y, x]) > sj.d.at(&[y, x]) && si.p.at(&[y, x]) >= sj.p.at(&[y, x]) {
                            dominance += 1;
                            ensure(l.a.at(&[i, y, x]) > l.a.at(&[j, y, x]), || format!("set {set}: depth dominance violated at ({y}, {x})"))?;
                        }
                    }
                }
            }
        }
        let shift: Vec<f64> = (0..side * side).map(|_| 10.0 * rng.normal()).collect();
        let shifted: Vec<_> = segs.iter().map(|s| SegmentDraft { d: Tensor::from_fn(s.d.shape(), |px| s.d.data()[px] + shift[px]), ..s.clone() }).collect();
        worst_shift = worst_shift.max(composite(shifted, k).map_err(|e| e.to_string())?.a.max_abs_diff(&l.a));
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.below(i + 1));
        }
        let lp = composite(perm.iter().map(|&i| segs[i].clone()).collect(), k).map_err(|e| e.to_string())?;
        worst_perm = worst_perm.max(lp.class_map.max_abs_diff(&l.class_map)).max(lp.depth_map.max_abs_diff(&l.depth_map));
        for (ip, &i) in perm.iter().enumerate() {
            worst_perm = worst_perm.max(lp.a.index0(ip).max_abs_diff(&l.a.index0(i)));
        }
    }
    ensure(worst_norm <= 1e-6, || format!("normalization off by {worst_norm:.2e}"))?;
    ensure(worst_shift <= 1e-9, || format!("depth shift changed A by {worst_shift:.2e}"))?;
    ensure(worst_perm <= 1e-9, || format!("permutation changed maps by {worst_perm:.2e}"))?;
    Ok(format!("1000 sets, |ΣA−1| ≤ {worst_norm:.1e}, shift {worst_shift:.1e}, permutation {worst_perm:.1e}, {dominance} dominance pairs strict"))
}

fn noise_statistics() -> Outcome {
    let cfg = NoiseConfig { sigma: 1.0, levels: vec![2, 4, 8] };
    let mut rng = Rng::new(7);
    let draws = 100_000;
    let (mut s1, mut s2, mut s11, mut s22, mut s12) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for _ in 0..draws {
        let n = hierarchical_noise::<f64>(8, &cfg, &mut rng).map_err(|e| e.to_string())?;
        // Same 2×2 and 4×4 cells, different 8×8 cells.
        let (a, b) = (n.at(&[0, 0]), n.at(&[0, 1]));
        s1 += a;
        s2 += b;
        s11 += a * a;
        s22 += b * b;
        s12 += a * b;
    }
    let nf = draws as f64;
    let (m1, m2) = (s1 / nf, s2 / nf);
    let (v1, v2) = (s11 / nf - m1 * m1, s22 / nf - m2 * m2);
    let corr = (s12 / nf - m1 * m2) / (v1 * v2).sqrt();
    ensure((v1 - 3.0).abs() <= 0.15 && (v2 - 3.0).abs() <= 0.15, || format!("variance {v1:.3}, {v2:.3} not within 5% of 3"))?;
    ensure((corr - 2.0 / 3.0).abs() <= 0.05, || format!("correlation {corr:.4} not within 0.05 of 2/3"))?;
    Ok(format!("variance {v1:.3}/{v2:.3}, correlation {corr:.4} over {draws} draws"))
}

fn trained_tiny() -> Result<Generator<f32>, String> {
    let cfg = tiny_config();
    let data = common::dataset(&cfg);
    let mut t = Trainer::<f32>::new(cfg).map_err(|e| e.to_string())?;
    t.run_schedule(&data).map_err(|e| e.to_string())?;
    Ok(t.generator())
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn manipulation_locality() -> Outcome {
    let gen = trained_tiny()?;
    let mut rng = Rng::new(3);
    let z_dim = gen.config.z_dim;
    for e in 0..100u64 {
        let scene = gen.scene(e).map_err(|e| e.to_string())?;
        let i = rng.below(scene.layout.len());
        let z = Tensor::new(&[z_dim], rng.normal_vec(z_dim, 1.0)).unwrap();
        let edited = gen.set_latent(&scene, i, Which::Structure, &z).map_err(|e| e.to_string())?;
        ensure(edited.layout.len() == scene.layout.len(), || format!("edit {e}: segment count changed"))?;
        for (j, (a, b)) in scene.layout.segments.iter().zip(&edited.layout.segments).enumerate().filter(|(j, _)| *j != i) {
            let same = [(&a.p, &b.p), (&a.m, &b.m), (&a.d, &b.d), (&a.z, &b.z), (&a.u, &b.u)].iter().all(|(x, y)| bits(x) == bits(y)) && a.birth_step == b.birth_step;
            ensure(same, || format!("structure edit {e} of segment {i} changed segment {j}"))?;
        }
        let scene = gen.scene(1000 + e).map_err(|e| e.to_string())?;
        let i = rng.below(scene.layout.len());
        let z = Tensor::new(&[z_dim], rng.normal_vec(z_dim, 1.0)).unwrap();
        let edited = gen.set_latent(&scene, i, Which::Style, &z).map_err(|e| e.to_string())?;
        ensure(bits(&edited.layout.tensor()) == bits(&scene.layout.tensor()) && edited.layout == scene.layout, || format!("style edit {e} changed the layout"))?;
    }
    Ok("100 structure edits and 100 style edits, untouched records bit-identical".into())
}

fn brute_miou(pred: &[usize], gt: &[usize], classes: usize) -> (f64, f64) {
    let mut miou = 0.0;
    for c in 0..classes {
        let support = gt.iter().filter(|&&g| g == c).count();
        if support == 0 {
            continue;
        }
        let inter = gt.iter().zip(pred).filter(|(g, p)| **g == c && **p == c).count();
        let union = gt.iter().zip(pred).filter(|(g, p)| **g == c || **p == c).count();
        miou += support as f64 / gt.len() as f64 * inter as f64 / union as f64;
    }
    let pacc = pred.iter().zip(gt).filter(|(a, b)| a == b).count() as f64 / gt.len() as f64;
    (miou, pacc)
}

fn brute_ari(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut both, mut sa, mut sb, mut pairs) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let (x, y) = (a[i] == a[j], b[i] == b[j]);
            both += f64::from(u8::from(x && y));
            sa += f64::from(u8::from(x));
            sb += f64::from(u8::from(y));
            pairs += 1.0;
        }
    }
    let expected = sa * sb / pairs;
    (both - expected) / (0.5 * (sa + sb) - expected)
}

fn metric_oracles() -> Outcome {
    let mut rng = Rng::new(0);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let classes = 2 + trial % 4;
        let gt: Vec<usize> = (0..64).map(|_| rng.below(classes)).collect();
        let pred: Vec<usize> = (0..64).map(|_| rng.below(classes)).collect();
        let s = miou_pacc(&pred, &gt, classes).map_err(|e| e.to_string())?;
        let (miou, pacc) = brute_miou(&pred, &gt, classes);
        let a = ari(&pred, &gt).map_err(|e| e.to_string())?;
        let want = brute_ari(&pred, &gt);
        ensure(want.is_finite(), || format!("map {trial} is degenerate"))?;
        worst = worst.max((s.miou - miou).abs()).max((s.pacc - pacc).abs()).max((a - want).abs());
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:.2e}"))?;
    let known = ari(&[0, 0, 1, 1], &[0, 1, 0, 1]).map_err(|e| e.to_string())?;
    ensure((known + 0.5).abs() <= 1e-12, || format!("ari([0,0,1,1],[0,1,0,1]) = {known}"))?;
    Ok(format!("100 random 8x8 maps, max deviation {worst:.1e}; ari([0,0,1,1],[0,1,0,1]) = {known}"))
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            let name = p.file_name().unwrap().to_string_lossy().to_string();
            out.extend(files(&p).into_iter().map(|(n, b)| (format!("{name}/{n}"), b)));
        } else {
            out.push((p.file_name().unwrap().to_string_lossy().to_string(), std::fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = tiny_config();
    cfg.train.steps = PhaseSteps { plan: 12, exec: 12, joint: 12 };
    let data = common::dataset(&cfg);
    let mut outputs = Vec::new();
    for run in 0..2 {
        let dir = tmp.path().join(format!("run{run}"));
        let mut t = Trainer::<f32>::new(cfg.clone()).map_err(|e| e.to_string())?;
        t.set_curve_dir(Some(dir.join("curves")));
        t.run_schedule(&data).map_err(|e| e.to_string())?;
        t.save(&dir.join("checkpoint.gf2c")).map_err(|e| e.to_string())?;
        let gen = Generator::<f32>::load(&dir.join("checkpoint.gf2c")).map_err(|e| e.to_string())?;
        for seed in 0..4 {
            let scene = gen.scene(seed).map_err(|e| e.to_string())?;
            export_visuals(&scene.layout, &scene.image, &dir.join(format!("sample{seed}"))).map_err(|e| e.to_string())?;
        }
        outputs.push(files(&dir));
    }
    let names: Vec<&String> = outputs[0].iter().map(|f| &f.0).collect();
    ensure(names.iter().any(|n| n.ends_with("image.ppm")) && names.iter().any(|n| n.as_str() == "checkpoint.gf2c"), || "missing outputs".into())?;
    let differing: Vec<&String> = outputs[0].iter().zip(&outputs[1]).filter(|(a, b)| a != b).map(|(a, _)| &a.0).collect();
    ensure(outputs[0].len() == outputs[1].len() && differing.is_empty(), || format!("differing files: {differing:?}"))?;
    Ok(format!("paired pipeline run twice: {} files byte-identical (checkpoint, curves, PPMs)", outputs[0].len()))
}

/// Recorded pilot of the smoke run; the thresholds below were calibrated on it.
const PILOT: &str = include_str!("data/smoke_pilot.json");

const SMOKE_PACC: f64 = 0.70;
const SMOKE_MARGIN: f64 = 0.05;
const SMOKE_DIVERSITY_RATIO: f64 = 3.0;
const SMOKE_MINUTES: f64 = 45.0;

struct SmokeRun {
    pacc: f64,
    diversity: f64,
    floor: f64,
    minutes: f64,
}

fn smoke_run(baseline: Baseline, held: &Dataset<f32>) -> Result<SmokeRun, String> {
    let mut cfg = Config::default();
    cfg.train.baseline = baseline;
    cfg.train.schedule = Schedule::Paired;
    let start = Instant::now();
    let data = Dataset::<f32>::generate(&cfg.data.toy, cfg.data.seed, cfg.data.count, cfg.model.max_segments).map_err(|e| e.to_string())?;
    let mut t = Trainer::<f32>::new(cfg).map_err(|e| e.to_string())?;
    t.run_schedule(&data).map_err(|e| e.to_string())?;
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let gen = t.generator();
    let layouts: Vec<_> = held.samples.iter().map(|s| &s.layout).collect();
    let (seg, _) = consistency_scores(&gen, &layouts, 0).map_err(|e| e.to_string())?;
    let (diversity, floor) = diversity_scores(&gen, &layouts[..8], 20, 0).map_err(|e| e.to_string())?;
    Ok(SmokeRun { pacc: seg.pacc, diversity, floor, minutes })
}

fn smoke_training() -> Outcome {
    let cfg = Config::default();
    ensure(cfg.data.count == 2000 && cfg.model.res == 32 && cfg.model.steps == 2, || "default configuration is not the smoke setting".into())?;
    let total = cfg.train.steps.plan + cfg.train.steps.exec + cfg.train.steps.joint;
    let held = Dataset::<f32>::generate(&cfg.data.toy, cfg.data.seed + 1, 64, cfg.model.max_segments).map_err(|e| e.to_string())?;
    let sm = smoke_run(Baseline::Sm, &held)?;
    let none = smoke_run(Baseline::None, &held)?;
    let pilot: serde_json::Value = serde_json::from_str(PILOT).map_err(|e| e.to_string())?;
    let summary = format!(
        "{total} steps; pAcc sm {:.3} vs none {:.3}; diversity {:.4} vs floor {:.6}; {:.1}/{:.1} min (pilot: sm {}, none {})",
        sm.pacc, none.pacc, sm.diversity, sm.floor, sm.minutes, none.minutes, pilot["sm"]["pacc"], pilot["none"]["pacc"]
    );
    let mut failures = Vec::new();
    if sm.pacc < SMOKE_PACC {
        failures.push(format!("(a) pAcc {:.3} < {SMOKE_PACC}", sm.pacc));
    }
    if sm.pacc - none.pacc < SMOKE_MARGIN {
        failures.push(format!("(b) margin {:.3} < {SMOKE_MARGIN}", sm.pacc - none.pacc));
    }
    if !(sm.diversity > SMOKE_DIVERSITY_RATIO * sm.floor) {
        failures.push(format!("(c) diversity {:.4} <= {SMOKE_DIVERSITY_RATIO} x {:.6}", sm.diversity, sm.floor));
    }
    for (name, run) in [("sm", &sm), ("none", &none)] {
        if run.minutes > SMOKE_MINUTES {
            failures.push(format!("{name} run took {:.1} min > {SMOKE_MINUTES}", run.minutes));
        }
    }
    ensure(failures.is_empty(), || format!("{}; {summary}", failures.join("; ")))?;
    Ok(summary)
}

const ABLATION_STEPS: usize = 200;

fn ablation_grid() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let mut digests = BTreeSet::new();
    let mut runs = 0;
    for steps in 0..=3 {
        for gate in GateMode::ALL {
            for baseline in [Baseline::None, Baseline::Concat, Baseline::Edge, Baseline::Sm] {
                let name = format!("t{steps}-{}-{}", gate.name(), baseline.name());
                let mut cfg = tiny_config();
                cfg.model.steps = steps;
                cfg.model.gate = gate;
                cfg.train.baseline = baseline;
                cfg.train.schedule = Schedule::Parallel;
                cfg.train.steps = PhaseSteps { plan: 0, exec: 0, joint: ABLATION_STEPS };
                let data = common::dataset(&cfg);
                let dir = tmp.path().join(&name);
                let mut t = Trainer::<f32>::new(cfg).map_err(|e| format!("{name}: {e}"))?;
                t.set_curve_dir(Some(dir.clone()));
                t.run_schedule(&data).map_err(|e| format!("{name}: {e}"))?;
                let finite = t.params().iter().all(|p| p.ids().all(|id| p.get(id).is_finite()));
                ensure(finite, || format!("{name}: non-finite parameters"))?;
                let curve = std::fs::read_to_string(dir.join("joint.csv")).map_err(|e| format!("{name}: {e}"))?;
                let logged: BTreeSet<&str> = curve.lines().skip(1).filter_map(|l| l.split(',').next()).collect();
                ensure(logged.len() == ABLATION_STEPS, || format!("{name}: {} logged steps, expected {ABLATION_STEPS}", logged.len()))?;
                ensure(!curve.contains("NaN") && !curve.contains("inf"), || format!("{name}: non-finite curve values"))?;
                digests.insert(curve);
                runs += 1;
            }
        }
    }
    ensure(digests.len() == runs, || format!("only {} distinct curves from {runs} runs", digests.len()))?;
    Ok(format!("{runs} runs x {ABLATION_STEPS} steps finite with distinct curve files, {:.0}s", start.elapsed().as_secs_f64()))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", gradient_suite),
        ("compositing invariants", composite_invariants),
        ("hierarchical noise statistics", noise_statistics),
        ("manipulation locality", manipulation_locality),
        ("metric oracles", metric_oracles),
        ("determinism", determinism),
        ("ablation grid", ablation_grid),
        ("smoke training", smoke_training),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
