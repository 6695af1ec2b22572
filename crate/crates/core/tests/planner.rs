mod common;

use common::{check, probe, randn};
use gf2_core::compositor::LayoutKind;
use gf2_core::nn::Params;
use gf2_core::planner::{levels_for, sample_segment_count, CountDistribution, Planner, PlannerConfig};
use gf2_core::{Rng, Tensor};

fn cfg(res: usize, steps: usize, k: usize) -> PlannerConfig {
    PlannerConfig {
        res,
        classes: 3,
        steps,
        channels: vec![4; levels_for(res).unwrap()],
        z_dim: 4,
        u_dim: 4,
        mapping_depth: 2,
        attn_dim: 4,
        heads: 1,
        pos_dim: 4,
        depth_dim: 4,
        slots: 0,
        max_segments: 8,
        count: CountDistribution { mu: k as f64, sigma: 0.0, k_min: 1, k_max: 4 },
    }
}

fn build(c: &PlannerConfig, seed: u64) -> (Params<f32>, Planner) {
    let mut params = Params::new();
    let planner = Planner::new(&mut params, c, &mut Rng::new(seed)).unwrap();
    (params, planner)
}

#[test]
fn count_sampling_rounds_and_clamps() {
    let mut rng = Rng::new(0);
    assert_eq!(sample_segment_count(&CountDistribution { mu: 2.4, sigma: 0.0, k_min: 0, k_max: 9 }, &mut rng), 2);
    assert_eq!(sample_segment_count(&CountDistribution { mu: -5.0, sigma: 0.0, k_min: 1, k_max: 9 }, &mut rng), 1);
    assert_eq!(sample_segment_count(&CountDistribution { mu: 50.0, sigma: 0.0, k_min: 1, k_max: 9 }, &mut rng), 9);
}

#[test]
fn count_sampling_mean_matches_mu() {
    let d = CountDistribution { mu: 3.0, sigma: 1.0, k_min: 0, k_max: 100 };
    let mut rng = Rng::new(1);
    let n = 100_000;
    let mean = (0..n).map(|_| sample_segment_count(&d, &mut rng) as f64).sum::<f64>() / n as f64;
    assert!((mean - 3.0).abs() <= 0.05, "mean {mean}");
}

#[test]
fn structure_mapping_is_shared_across_rows() {
    let (params, planner) = build(&cfg(8, 1, 2), 2);
    let mut rng = Rng::new(3);
    let row: Tensor<f32> = randn(&[1, 4], &mut rng);
    let z = Tensor::stack(&[row.index0(0), row.index0(0), randn::<f32>(&[4], &mut rng)]).unwrap();
    let u = planner.map_structure_latents(&params, &z).unwrap();
    assert!(u.index0(0).bit_eq(&u.index0(1)));
    assert!(!u.index0(0).bit_eq(&u.index0(2)));
    let before = params.count();
    for k in [1, 8] {
        assert_eq!(planner.map_structure_latents(&params, &randn(&[k, 4], &mut rng)).unwrap().shape(), &[k, 4]);
    }
    assert_eq!(params.count(), before);
}

#[test]
fn structure_mapping_gradients_match_finite_differences() {
    for seed in 0..10u64 {
        let (params, planner) = build(&cfg(8, 1, 2), 10 + seed);
        let mut rng = Rng::new(seed);
        let inputs = vec![randn::<f32>(&[3, 4], &mut rng)];
        check(&inputs, &params, 1e-3, seed, probe!(planner: Planner = planner.clone(); |tape, params, v| planner.map_vars(tape, params, v[0])))
            .assert_below(1e-3);
    }
}

#[test]
fn plan_step_gradients_match_finite_differences() {
    for seed in 0..10u64 {
        let (params, planner) = build(&cfg(8, 1, 2), 20 + seed);
        let mut rng = Rng::new(100 + seed);
        let k = 1 + seed as usize % 3;
        let prev = Tensor::from_fn(&[3, 8, 8], |_| rng.uniform() as f32);
        let inputs = vec![randn::<f32>(&[k, 4], &mut rng), prev];
        check(
            &inputs,
            &params,
            1e-3,
            seed,
            probe!(planner: Planner = planner.clone(), k: usize = k; |tape, params, v| {
                let s = planner.step_vars(tape, params, v[0], v[1])?;
                tape.concat(&[s.p.reshape(&[k, 64])?.scale(64.0)?, s.d.reshape(&[k, 64])?, s.m], 1)
            }),
        )
        .assert_below(1e-3);
    }
}

#[test]
fn plan_step_emits_normalized_drafts() {
    let (params, planner) = build(&cfg(8, 1, 2), 4);
    let mut rng = Rng::new(5);
    for k in [1, 3, 5] {
        let z: Tensor<f32> = randn(&[k, 4], &mut rng);
        let drafts = planner.plan_step(&params, &z, None, 1).unwrap();
        assert_eq!(drafts.len(), k);
        for d in &drafts {
            assert!((d.p.sum() as f64 - 1.0).abs() <= 1e-5);
            assert!((d.m.sum() as f64 - 1.0).abs() <= 1e-6);
            assert!(d.p.is_finite() && d.d.is_finite());
            assert_eq!(d.birth_step, 1);
        }
        let again = planner.plan_step(&params, &z, None, 1).unwrap();
        assert!(drafts.iter().zip(&again).all(|(a, b)| a.p.bit_eq(&b.p) && a.m.bit_eq(&b.m) && a.d.bit_eq(&b.d)));
    }
}

#[test]
fn previous_layout_conditions_the_step() {
    let c = cfg(8, 1, 2);
    let (params, planner) = build(&c, 6);
    let mut rng = Rng::new(7);
    let z: Tensor<f32> = randn(&[2, 4], &mut rng);
    for i in 0..10 {
        let l1 = planner.plan_scene(&params, &Rng::new(2 * i)).unwrap();
        let l2 = planner.plan_scene(&params, &Rng::new(2 * i + 1)).unwrap();
        let a = planner.plan_step(&params, &z, Some(&l1), 2).unwrap();
        let b = planner.plan_step(&params, &z, Some(&l2), 2).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| !x.p.bit_eq(&y.p) || !x.m.bit_eq(&y.m) || !x.d.bit_eq(&y.d)));
    }
}

#[test]
fn scene_bookkeeping_over_steps() {
    let (params, planner) = build(&cfg(8, 2, 3), 8);
    let l = planner.plan_scene(&params, &Rng::new(9)).unwrap();
    assert_eq!(l.len(), 6);
    assert_eq!(l.segments.iter().map(|s| s.birth_step).collect::<Vec<_>>(), vec![1, 1, 1, 2, 2, 2]);
    assert_eq!(l.kind, LayoutKind::Composited);
    for px in 0..64 {
        let total: f64 = (0..6).map(|i| l.a.data()[i * 64 + px] as f64).sum();
        assert!((total - 1.0).abs() <= 1e-6);
    }
    let again = planner.plan_scene(&params, &Rng::new(9)).unwrap();
    assert_eq!(l, again);
}

#[test]
fn dense_mode_emits_one_pseudo_segment() {
    let (params, planner) = build(&cfg(8, 0, 3), 10);
    let l = planner.plan_scene(&params, &Rng::new(11)).unwrap();
    assert_eq!(l.kind, LayoutKind::Dense);
    assert_eq!(l.len(), 1);
    assert!(l.a.data().iter().all(|&v| v == 1.0));
    for px in 0..64 {
        let total: f64 = (0..3).map(|c| l.class_map.data()[c * 64 + px] as f64).sum();
        assert!((total - 1.0).abs() <= 1e-5);
    }
}

#[test]
fn every_step_count_runs_with_the_same_parameters() {
    let mut counts = Vec::new();
    for steps in 0..=3 {
        let (params, planner) = build(&cfg(8, steps, 2), 12);
        let l = planner.plan_scene(&params, &Rng::new(13)).unwrap();
        assert_eq!(l.len(), if steps == 0 { 1 } else { 2 * steps });
        counts.push(params.count());
    }
    assert!(counts.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn capacity_caps_the_segment_count() {
    let mut c = cfg(8, 3, 4);
    c.max_segments = 5;
    let (params, planner) = build(&c, 14);
    let l = planner.plan_scene(&params, &Rng::new(15)).unwrap();
    assert_eq!(l.len(), 5);
    assert_eq!(l.tensor().shape(), &[8, 8, 8]);
}

#[test]
fn regeneration_touches_only_its_segment() {
    let (params, planner) = build(&cfg(8, 2, 2), 16);
    let mut rng = Rng::new(17);
    for trial in 0..5 {
        let l = planner.plan_scene(&params, &Rng::new(100 + trial)).unwrap();
        let i = rng.below(l.len());
        let same = planner.regenerate_segment(&params, &l, i, &l.segments[i].z).unwrap();
        assert_eq!(same, l);
        let z0 = l.segments[i].z.clone();
        let z1: Tensor<f32> = randn(&[4], &mut rng);
        let mut outs = Vec::new();
        for t in [0.0f32, 0.5, 1.0] {
            let zt = Tensor::from_fn(&[4], |j| (1.0 - t) * z0.data()[j] + t * z1.data()[j]);
            let r = planner.regenerate_segment(&params, &l, i, &zt).unwrap();
            for j in (0..l.len()).filter(|&j| j != i) {
                assert_eq!(r.segments[j], l.segments[j]);
            }
            assert!(r.segments[i].z.bit_eq(&zt));
            outs.push(r);
        }
        assert!(outs[0].a.bit_eq(&l.a));
        assert!(!outs[1].a.bit_eq(&outs[0].a) && !outs[2].a.bit_eq(&outs[1].a) && !outs[2].a.bit_eq(&outs[0].a));
    }
    let l = planner.plan_scene(&params, &Rng::new(0)).unwrap();
    assert!(planner.regenerate_segment(&params, &l, l.len(), &l.segments[0].z).is_err());
}

#[test]
fn adding_segments_extends_the_layout() {
    let (params, planner) = build(&cfg(8, 1, 2), 18);
    let l = planner.plan_scene(&params, &Rng::new(19)).unwrap();
    let bigger = planner.add_segments(&params, &l, &Rng::new(20)).unwrap();
    assert_eq!(bigger.len(), 4);
    assert_eq!(&bigger.segments[..2], &l.segments[..]);
    assert!(bigger.segments[2..].iter().all(|s| s.birth_step == 2));
}

#[test]
fn count_fit_uses_per_step_counts() {
    let d = CountDistribution::fit(&[3, 5, 4], 1, 1, 6).unwrap();
    assert!((d.mu - 4.0).abs() < 1e-12);
    assert!(CountDistribution::fit(&[], 1, 1, 6).is_err());
}
