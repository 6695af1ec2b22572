mod common;

use common::{check, probe, randn};
use gf2_core::nn::Params;
use gf2_core::{Error, Rng, Tape, Tensor};

fn t(shape: &[usize], v: &[f64]) -> Tensor<f32> {
    Tensor::from_f64(shape, v).unwrap()
}

#[test]
fn matmul_examples() {
    let tape = Tape::<f32>::new();
    let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    assert_eq!(i2.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
    let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
    assert_eq!(a.matmul(b).unwrap().value().data(), &[11.0]);
    let bad = tape.constant(t(&[3, 1], &[0.0; 3]));
    assert!(matches!(a.matmul(bad), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = Rng::new(1);
    for seed in 0..10 {
        let inputs = vec![randn::<f32>(&[5, 7], &mut rng), randn(&[7, 3], &mut rng)];
        check(&inputs, &Params::new(), 1e-3, seed, probe!(; |t, p, v| v[0].matmul(v[1]))).assert_below(1e-3);
        let inputs = vec![randn::<f32>(&[2, 4, 3], &mut rng), randn(&[5, 3], &mut rng)];
        check(&inputs, &Params::new(), 1e-3, seed, probe!(; |t, p, v| v[0].matmul_t(v[1]))).assert_below(1e-3);
    }
}

#[test]
fn softmax_examples() {
    let tape = Tape::<f32>::new();
    let s = tape.constant(t(&[3], &[0.0, 0.0, 0.0])).softmax(0).unwrap().value();
    assert!(s.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-7));
    let s = tape.constant(t(&[2], &[3f64.ln(), 0.0])).softmax(0).unwrap().value();
    assert!((s.data()[0] - 0.75).abs() < 1e-6 && (s.data()[1] - 0.25).abs() < 1e-6);
    let s = tape.constant(t(&[2], &[1000.0, 0.0])).softmax(0).unwrap().value();
    assert_eq!(s.data()[0], 1.0);
    assert!(s.data()[1] < 1e-30);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = Rng::new(2);
    let tape = Tape::<f32>::new();
    for axis in 0..3 {
        let x = tape.constant(Tensor::randn(&[4, 5, 6], 5.0, &mut rng));
        let y = x.softmax(axis).unwrap().sum_axis(axis).unwrap().value();
        assert!(y.data().iter().all(|v| (v - 1.0).abs() <= 1e-6), "axis {axis}");
    }
}

#[test]
fn layernorm_examples() {
    let tape = Tape::<f64>::new();
    let y = tape.constant(Tensor::from_f64(&[2], &[1.0, 3.0]).unwrap()).layernorm(0, 1e-12).unwrap().value();
    assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
    let tape = Tape::<f32>::new();
    let y = tape.constant(t(&[3], &[5.0, 5.0, 5.0])).layernorm(0, 1e-5).unwrap().value();
    assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
    let mut rng = Rng::new(3);
    let y = tape.constant(Tensor::randn(&[4, 8], 3.0, &mut rng)).layernorm(1, 1e-5).unwrap().value();
    for row in y.data().chunks(8) {
        assert!((row.iter().sum::<f32>() / 8.0).abs() < 1e-5);
    }
    assert!(tape.constant(t(&[2], &[1.0, 2.0])).layernorm(0, 0.0).is_err());
}

#[test]
fn layernorm_and_softmax_gradients() {
    let mut rng = Rng::new(4);
    for seed in 0..10 {
        let inputs = vec![randn::<f32>(&[4, 8], &mut rng)];
        check(&inputs, &Params::new(), 1e-3, seed, probe!(; |t, p, v| v[0].layernorm(1, 1e-5))).assert_below(1e-3);
        check(&inputs, &Params::new(), 1e-3, seed, probe!(; |t, p, v| v[0].softmax(0))).assert_below(1e-3);
        check(&inputs, &Params::new(), 1e-3, seed, probe!(; |t, p, v| v[0].log_softmax(1))).assert_below(1e-3);
    }
}

#[test]
fn conv2d_examples() {
    let tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    assert_eq!(x.conv2d(w, 1, 0).unwrap().value().data(), &[9.0]);

    let mut rng = Rng::new(5);
    let xv = Tensor::<f32>::randn(&[2, 2, 5, 5], 1.0, &mut rng);
    let mut k = vec![0.0; 2 * 2 * 9];
    k[4] = 1.0; // out 0 <- in 0 centre
    k[(2 + 1) * 9 + 4] = 1.0; // out 1 <- in 1 centre
    let y = tape.constant(xv.clone()).conv2d(tape.constant(t(&[2, 2, 3, 3], &k)), 1, 1).unwrap().value();
    assert_eq!(y, xv);

    let y = tape.constant(Tensor::<f32>::zeros(&[1, 2, 7, 7])).conv2d(tape.constant(Tensor::zeros(&[4, 2, 3, 3])), 2, 1);
    assert_eq!(y.unwrap().shape(), vec![1, 4, 4, 4]);
    let bad = tape.constant(Tensor::<f32>::zeros(&[1, 3, 4, 4])).conv2d(tape.constant(Tensor::zeros(&[4, 2, 3, 3])), 1, 1);
    assert!(matches!(bad, Err(Error::ShapeMismatch { .. })));
}

#[test]
fn conv2d_gradients() {
    let mut rng = Rng::new(6);
    for seed in 0..10 {
        let stride = 1 + (seed as usize % 2);
        let pad = (seed as usize / 2) % 2;
        let inputs = vec![randn::<f32>(&[2, 3, 6, 6], &mut rng), randn(&[4, 3, 3, 3], &mut rng)];
        check(&inputs, &Params::new(), 1e-3, seed, probe!(stride: usize = stride, pad: usize = pad; |t, p, v| v[0].conv2d(v[1], stride, pad))).assert_below(1e-3);
    }
}

#[test]
fn upsample_examples() {
    let tape = Tape::<f32>::new();
    let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    assert_eq!(x.upsample_nearest(1).unwrap().value(), x.value());
    let y = x.upsample_nearest(2).unwrap().value();
    assert_eq!(y.shape(), &[4, 4]);
    assert_eq!(y.data(), &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]);
    let mut rng = Rng::new(7);
    let x = tape.constant(Tensor::randn(&[3, 4, 5], 1.0, &mut rng));
    let y = x.upsample_nearest(3).unwrap();
    let (sx, sy) = (x.value().sum(), y.value().sum());
    assert!((sy - 9.0 * sx).abs() < 1e-4);
}

#[test]
fn elementwise_and_reduction_gradients() {
    let mut rng = Rng::new(8);
    for seed in 0..10 {
        let inputs = vec![randn::<f32>(&[3, 1, 4], &mut rng), randn(&[2, 1], &mut rng)];
        let f = probe!(; |tape, p, v| {
            let m = v[0].mul(v[1])?;
            let d = m.div(v[1].square()?.add_scalar(1.0)?)?;
            d.sub(v[0])?.tanh()?.add(v[1].sigmoid()?)
        });
        check(&inputs, &Params::new(), 1e-3, seed, f)
        .assert_below(1e-3);
        let inputs = vec![randn::<f32>(&[2, 3, 4, 4], &mut rng)];
        let f = probe!(; |tape, params, v| {
            let p = v[0].avg_pool(2)?.upsample_nearest(2)?;
            let c = tape.concat(&[p, v[0].narrow(1, 1, 2)?], 1)?;
            c.permute(&[0, 2, 3, 1])?.softplus()?.sum_axis(3)?.mean_axis(1)
        });
        check(&inputs, &Params::new(), 1e-3, seed, f)
        .assert_below(1e-3);
    }
}

#[test]
fn backward_examples() {
    let tape = Tape::<f32>::new();
    let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
    let g = tape.backward(x.sum().unwrap()).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    let g = tape.backward(x.mul(x).unwrap().sum().unwrap()).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    // fan-out accumulates
    let y = x.add(x).unwrap().add(x).unwrap().sum().unwrap();
    assert_eq!(tape.backward(y).unwrap().get(x).unwrap().data(), &[3.0, 3.0, 3.0]);
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    tape.clear();
    assert!(matches!(tape.backward(y), Err(Error::BrokenTape)));
}

#[test]
fn non_finite_is_an_error() {
    let tape = Tape::<f32>::new();
    let x = tape.constant(t(&[2], &[-1.0, 1.0]));
    assert!(matches!(x.ln(), Err(Error::NonFinite { op: "log" })));
}

#[test]
fn forward_backward_is_bit_deterministic() {
    let run = || {
        let mut rng = Rng::new(9);
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng), true);
        let w = tape.leaf(Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng), true);
        let y = x.conv2d(w, 1, 1).unwrap().layernorm(1, 1e-5).unwrap().softmax(3).unwrap().square().unwrap().sum().unwrap();
        let g = tape.backward(y).unwrap();
        (y.value(), g.get(w).unwrap().clone(), g.get(x).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert!(a.0.bit_eq(&b.0) && a.1.bit_eq(&b.1) && a.2.bit_eq(&b.2));
}
