//! Finite-difference sweeps over every primitive operation and the
//! composite losses, plus higher-order checks that mirror how the
//! hypergradient algorithms re-enter the backward pass.

use commentary_core::models::{forward, init_params, one_hot, Activation, MlpSpec, OutputHead};
use commentary_core::param::{hvp, ParamVector};
use commentary_core::tensor::{
    grad, row_broadcast, row_softmax, row_sum, softmax_cross_entropy, squared_error, vjp, Tape,
    Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: usize = 20;
const FD_EPS: f64 = 1e-6;
const REL_TOL: f64 = 1e-5;

/// Check d(scalar f)/d(inputs) against central finite differences, with
/// the whole graph rebuilt at each perturbed point.
fn check_grad<F>(name: &str, input_lens: &[usize], lo: f64, hi: f64, seed: u64, f: F)
where
    F: Fn(&Tape, &[Tensor]) -> Tensor,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..TRIALS {
        let data: Vec<Vec<f64>> = input_lens
            .iter()
            .map(|&n| (0..n).map(|_| rng.gen_range(lo..hi)).collect())
            .collect();
        let eval = |data: &[Vec<f64>]| {
            let tape = Tape::new();
            let leaves: Vec<Tensor> = data
                .iter()
                .map(|v| tape.leaf(v.clone(), &[v.len()]).unwrap())
                .collect();
            f(&tape, &leaves).item()
        };
        let tape = Tape::new();
        let leaves: Vec<Tensor> = data
            .iter()
            .map(|v| tape.leaf(v.clone(), &[v.len()]).unwrap())
            .collect();
        let out = f(&tape, &leaves);
        assert!(out.shape().is_empty(), "{name}: output must be scalar");
        let refs: Vec<&Tensor> = leaves.iter().collect();
        let grads = grad(&out, &refs, false).unwrap();
        for (inp, g) in grads.iter().enumerate() {
            let gv = g.values();
            for i in 0..input_lens[inp] {
                let mut plus = data.clone();
                let mut minus = data.clone();
                plus[inp][i] += FD_EPS;
                minus[inp][i] -= FD_EPS;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_EPS);
                let err = (gv[i] - fd).abs();
                assert!(
                    err / fd.abs().max(1.0) < REL_TOL,
                    "{name} trial {trial} input {inp}[{i}]: grad {} vs fd {}",
                    gv[i],
                    fd
                );
            }
        }
    }
}

#[test]
fn elementwise_binary_ops() {
    check_grad("add", &[4, 4], -2.0, 2.0, 1, |_, x| {
        x[0].add(&x[1]).unwrap().mul(&x[0]).unwrap().sum()
    });
    check_grad("sub", &[4, 4], -2.0, 2.0, 2, |_, x| {
        x[0].sub(&x[1]).unwrap().mul(&x[1]).unwrap().sum()
    });
    check_grad("mul", &[4, 4], -2.0, 2.0, 3, |_, x| {
        x[0].mul(&x[1]).unwrap().sum()
    });
    check_grad("div", &[4, 4], 0.5, 2.0, 4, |_, x| {
        x[0].div(&x[1]).unwrap().sum()
    });
}

#[test]
fn elementwise_unary_ops() {
    check_grad("sigmoid", &[5], -3.0, 3.0, 5, |_, x| x[0].sigmoid().sum());
    check_grad("tanh", &[5], -3.0, 3.0, 6, |_, x| x[0].tanh().sum());
    check_grad("exp", &[5], -2.0, 2.0, 7, |_, x| x[0].exp().sum());
    check_grad("log", &[5], 0.2, 3.0, 8, |_, x| x[0].log().sum());
    check_grad("sqrt", &[5], 0.2, 3.0, 9, |_, x| x[0].sqrt().sum());
    // relu sampled away from the kink
    check_grad("relu_pos", &[5], 0.5, 2.0, 10, |_, x| x[0].relu().sum());
    check_grad("relu_neg", &[5], -2.0, -0.5, 11, |_, x| x[0].relu().sum());
    check_grad("scale_neg_addscalar", &[5], -2.0, 2.0, 12, |_, x| {
        x[0].scale(1.7).neg().add_scalar(0.3).mul(&x[0]).unwrap().sum()
    });
}

#[test]
fn matmul_and_transpose() {
    check_grad("matmul", &[6, 6], -1.5, 1.5, 13, |_, x| {
        let a = x[0].reshape(&[2, 3]).unwrap();
        let b = x[1].reshape(&[3, 2]).unwrap();
        a.matmul(&b).unwrap().mul(&a.matmul(&b).unwrap()).unwrap().sum()
    });
    check_grad("transpose", &[6, 6], -1.5, 1.5, 14, |_, x| {
        let a = x[0].reshape(&[2, 3]).unwrap();
        let b = x[1].reshape(&[2, 3]).unwrap();
        a.transpose().unwrap().matmul(&b).unwrap().sum()
    });
}

#[test]
fn shape_ops() {
    check_grad("broadcast", &[3], -2.0, 2.0, 15, |_, x| {
        let b = x[0].broadcast_to(&[4, 3]).unwrap();
        b.mul(&b).unwrap().sum()
    });
    check_grad("sum_to", &[12], -2.0, 2.0, 16, |_, x| {
        let m = x[0].reshape(&[4, 3]).unwrap();
        let s = m.sum_to(&[3]).unwrap();
        s.mul(&s).unwrap().sum()
    });
    check_grad("concat_slice", &[4, 4], -2.0, 2.0, 17, |_, x| {
        let a = x[0].reshape(&[2, 2]).unwrap();
        let b = x[1].reshape(&[2, 2]).unwrap();
        let c = a.concat(&b).unwrap();
        let left = c.slice_last(0, 3).unwrap();
        left.mul(&left).unwrap().sum()
    });
    check_grad("mean", &[6], -2.0, 2.0, 18, |_, x| {
        x[0].mul(&x[0]).unwrap().mean()
    });
}

#[test]
fn composite_losses() {
    check_grad("row_softmax", &[8], -3.0, 3.0, 19, |_, x| {
        let m = x[0].reshape(&[2, 4]).unwrap();
        let p = row_softmax(&m).unwrap();
        p.mul(&p).unwrap().sum()
    });
    check_grad("softmax_xent", &[6], -3.0, 3.0, 20, |tape, x| {
        let logits = x[0].reshape(&[2, 3]).unwrap();
        let targets = one_hot(tape, &[0, 2], 3).unwrap();
        softmax_cross_entropy(&logits, &targets).unwrap().mean()
    });
    check_grad("squared_error", &[6, 6], -2.0, 2.0, 21, |_, x| {
        let p = x[0].reshape(&[2, 3]).unwrap();
        let t = x[1].reshape(&[2, 3]).unwrap();
        squared_error(&p, &t).unwrap().mean()
    });
    check_grad("row_sum_broadcast", &[3], -2.0, 2.0, 22, |_, x| {
        let b = row_broadcast(&x[0], 4).unwrap();
        row_sum(&b).unwrap().mul(&x[0]).unwrap().sum()
    });
}

#[test]
fn second_derivatives_of_univariate_ops() {
    // d2/dx2 checked against closed forms at a handful of points.
    let cases: Vec<(&str, Box<dyn Fn(&Tensor) -> Tensor>, Box<dyn Fn(f64) -> f64>)> = vec![
        (
            "exp",
            Box::new(|x: &Tensor| x.exp()),
            Box::new(|x: f64| x.exp()),
        ),
        (
            "log",
            Box::new(|x: &Tensor| x.log()),
            Box::new(|x: f64| -1.0 / (x * x)),
        ),
        (
            "sqrt",
            Box::new(|x: &Tensor| x.sqrt()),
            Box::new(|x: f64| -0.25 * x.powf(-1.5)),
        ),
        (
            "sigmoid",
            Box::new(|x: &Tensor| x.sigmoid()),
            Box::new(|x: f64| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }),
        ),
        (
            "tanh",
            Box::new(|x: &Tensor| x.tanh()),
            Box::new(|x: f64| {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }),
        ),
    ];
    for (name, f, d2) in &cases {
        for &x0 in &[0.3, 0.9, 1.7] {
            let tape = Tape::new();
            let x = tape.scalar(x0);
            let y = f(&x);
            let g1 = grad(&y, &[&x], true).unwrap();
            let g2 = grad(&g1[0], &[&x], false).unwrap();
            let got = g2[0].item();
            let want = d2(x0);
            assert!(
                (got - want).abs() < 1e-10 * want.abs().max(1.0),
                "{name} at {x0}: {got} vs {want}"
            );
        }
    }
}

#[test]
fn vjp_agrees_with_grad_of_projections() {
    // For random cotangents u: vjp(f, u) == grad(<f, u>).
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..5 {
        let tape = Tape::new();
        let xv: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let x = tape.leaf(xv, &[2, 3]).unwrap();
        let w = tape
            .leaf((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[3, 2])
            .unwrap();
        let y = x.matmul(&w).unwrap().tanh();
        let uv: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u = tape.leaf(uv, &[2, 2]).unwrap();
        let via_vjp = vjp(&y, &[&x], &u).unwrap();
        let proj = y.mul(&u).unwrap().sum();
        let via_grad = grad(&proj, &[&x], false).unwrap();
        let a = via_vjp[0].values();
        let b = via_grad[0].values();
        for i in 0..a.len() {
            assert!((a[i] - b[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn hvp_matches_finite_differences_of_gradients_on_an_mlp() {
    let spec = MlpSpec::new(vec![2, 2], Activation::Tanh, OutputHead::Logits).unwrap();
    let shapes = vec![vec![2, 2], vec![2]];
    let inputs = vec![0.3, -0.8, 1.1, 0.4];
    let labels = [0usize, 1];
    let grad_at = |flat: &[f64]| -> Vec<f64> {
        let tape = Tape::new();
        let p = ParamVector::from_flat(&tape, &shapes, flat).unwrap();
        let x = tape.leaf(inputs.clone(), &[2, 2]).unwrap();
        let logits = forward(&spec, &p, &x).unwrap();
        let targets = one_hot(&tape, &labels, 2).unwrap();
        let loss = softmax_cross_entropy(&logits, &targets).unwrap().mean();
        ParamVector::new(grad(&loss, &p.refs(), false).unwrap()).flatten()
    };
    let tape = Tape::new();
    let p0 = init_params(&spec, 17, &tape).unwrap();
    let flat = p0.flatten();
    let x = tape.leaf(inputs.clone(), &[2, 2]).unwrap();
    let logits = forward(&spec, &p0, &x).unwrap();
    let targets = one_hot(&tape, &labels, 2).unwrap();
    let loss = softmax_cross_entropy(&logits, &targets).unwrap().mean();

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..3 {
        let v: Vec<f64> = (0..flat.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let hv = hvp(&loss, &p0, &v).unwrap();
        let eps = 1e-5;
        let plus: Vec<f64> = flat.iter().zip(&v).map(|(a, b)| a + eps * b).collect();
        let minus: Vec<f64> = flat.iter().zip(&v).map(|(a, b)| a - eps * b).collect();
        let gp = grad_at(&plus);
        let gm = grad_at(&minus);
        for i in 0..flat.len() {
            let fd = (gp[i] - gm[i]) / (2.0 * eps);
            assert!(
                (hv[i] - fd).abs() / fd.abs().max(1.0) < 1e-4,
                "hvp[{i}] {} vs fd {}",
                hv[i],
                fd
            );
        }
    }
}

#[test]
fn tape_replay_is_deterministic_for_a_full_training_step() {
    let tape = Tape::new();
    let spec = MlpSpec::new(vec![3, 4, 2], Activation::Relu, OutputHead::Logits).unwrap();
    let p = init_params(&spec, 3, &tape).unwrap();
    let x = tape
        .leaf(vec![0.1, 0.5, -0.2, 0.9, -0.7, 0.3], &[2, 3])
        .unwrap();
    let logits = forward(&spec, &p, &x).unwrap();
    let targets = one_hot(&tape, &[1, 0], 2).unwrap();
    let loss = softmax_cross_entropy(&logits, &targets).unwrap().mean();
    let _ = grad(&loss, &p.refs(), false).unwrap();
    assert!(tape.replay_is_deterministic());
}
