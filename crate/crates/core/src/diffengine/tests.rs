use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

#[test]
fn matmul_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tape = Tape::new();
    let a = rand_tensor(&mut rng, vec![3, 3], -2.0, 2.0);
    let out = tape.leaf(Tensor::eye(3)).matmul(tape.leaf(a.clone()));
    assert_eq!(*out.value(), a);
}

#[test]
fn relu_definition() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::row(vec![-1.0f64, 0.0, 2.0]));
    assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn logsumexp_large_inputs_stay_finite() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::row(vec![1000.0f64, 1000.0]));
    let y = x.logsumexp_rows().item();
    // shifted sum by hand: 1000 + ln(e^0 + e^0)
    let expected = 1000.0 + (1.0f64 + 1.0).ln();
    assert!(y.is_finite());
    assert!((y - expected).abs() < 1e-12);
}

#[test]
fn square_derivative_at_three() {
    let tape = Tape::new();
    let x = tape.scalar(3.0f64);
    let g = tape.backward(x.square()).unwrap();
    assert_eq!(g.wrt(x).unwrap().item(), 6.0);
}

#[test]
fn constant_has_zero_gradient() {
    let tape = Tape::new();
    let x = tape.scalar(3.0f64);
    let c = tape.scalar(7.0f64);
    let g = tape.backward(c.scale(2.0)).unwrap();
    assert_eq!(g.wrt(x).unwrap().item(), 0.0);
}

#[test]
fn softplus_gradient_at_zero() {
    let h = 1e-5;
    let sp = |v: f64| {
        let tape = Tape::new();
        tape.scalar(v).softplus().item()
    };
    let numeric = (sp(h) - sp(-h)) / (2.0 * h);
    let tape = Tape::new();
    let x = tape.scalar(0.0f64);
    let analytic = tape.backward(x.softplus()).unwrap().wrt(x).unwrap().item();
    assert!((numeric - 0.5).abs() < 1e-9);
    assert!((analytic - numeric).abs() < 1e-9);
}

#[test]
fn grad_check_sum_of_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, vec![1, 8], -2.0, 2.0);
    let err = grad_check(|_, v| v[0].square().sum(), &[x], 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_check_constant_function_is_exactly_zero() {
    let x = Tensor::row(vec![0.3f64, -0.2]);
    let tape = Tape::new();
    let v = tape.leaf(x.clone());
    let loss = tape.scalar(4.0).scale(0.5);
    let g = tape.backward(loss).unwrap().wrt(v).unwrap();
    assert!(g.data().iter().all(|&d| d == 0.0));
    let err = grad_check(|t, _| t.scalar(4.0), &[x], 1e-5).unwrap();
    assert_eq!(err, 0.0);
}

/// Every primitive against central differences at random conforming inputs.
#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, vec![3, 4], -2.0, 2.0);
    let b = rand_tensor(&mut rng, vec![4, 2], -2.0, 2.0);
    let c = rand_tensor(&mut rng, vec![3, 4], -2.0, 2.0);
    let pos = rand_tensor(&mut rng, vec![3, 4], 0.5, 3.0);
    let row = rand_tensor(&mut rng, vec![1, 4], -1.0, 1.0);
    let s = rand_tensor(&mut rng, vec![], 0.5, 1.5);
    // keep relu/abs/clamp inputs away from their kinks
    let away = a.map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    let weights = rand_tensor(&mut rng, vec![3, 4], -1.0, 1.0);

    type Case = (&'static str, Vec<Tensor<f64>>, Box<dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>>);
    let w = weights.clone();
    let weigh = move |_: &Tape<f64>| w.clone();
    let cases: Vec<Case> = vec![
        ("matmul", vec![a.clone(), b.clone()], Box::new(|_, v| v[0].matmul(v[1]).square().sum())),
        ("add", vec![a.clone(), c.clone()], Box::new(|_, v| (v[0] + v[1]).square().sum())),
        ("sub", vec![a.clone(), c.clone()], Box::new(|_, v| (v[0] - v[1]).square().sum())),
        ("mul", vec![a.clone(), c.clone()], Box::new(|_, v| (v[0] * v[1]).sum())),
        ("mul_scalar_bcast", vec![a.clone(), s.clone()], Box::new(|_, v| (v[0] * v[1]).square().sum())),
        ("add_scalar_bcast", vec![s.clone(), a.clone()], Box::new(|_, v| (v[0] + v[1]).square().sum())),
        ("relu", vec![away.clone()], Box::new(move |t, v| (v[0].relu() * t.leaf(weigh(t))).sum())),
        ("softplus", vec![a.clone()], Box::new(|_, v| v[0].softplus().square().sum())),
        ("sigmoid", vec![a.clone()], Box::new(|_, v| v[0].sigmoid().square().sum())),
        ("exp", vec![a.clone()], Box::new(|_, v| v[0].exp().sum())),
        ("log", vec![pos.clone()], Box::new(|_, v| v[0].ln().square().sum())),
        ("square", vec![a.clone()], Box::new(|_, v| v[0].square().sum())),
        ("abs", vec![away.clone()], Box::new(|_, v| v[0].abs().square().sum())),
        ("neg", vec![a.clone()], Box::new(|_, v| (-v[0]).exp().sum())),
        ("mean", vec![a.clone()], Box::new(|_, v| v[0].square().mean())),
        ("sum_rows", vec![a.clone()], Box::new(|_, v| v[0].sum_rows().square().sum())),
        ("reshape", vec![a.clone(), b.clone()], Box::new(|_, v| v[0].reshape(vec![2, 6]).reshape(vec![3, 4]).matmul(v[1]).square().sum())),
        ("concat", vec![a.clone(), c.clone()], Box::new(|_, v| Var::concat(&[v[0], v[1].square()]).logsumexp_rows().sum())),
        ("slice", vec![a.clone()], Box::new(|_, v| v[0].slice_cols(1, 3).exp().sum())),
        ("logsumexp", vec![a.clone()], Box::new(|_, v| v[0].logsumexp_rows().square().sum())),
        ("add_row", vec![a.clone(), row.clone()], Box::new(|_, v| v[0].add_row(v[1]).square().sum())),
        ("clamp", vec![away.clone()], Box::new(|_, v| v[0].clamp(-1.0, 1.0).square().sum())),
        ("scale_shift", vec![a.clone()], Box::new(|_, v| v[0].scale(1.7).shift(-0.3).square().sum())),
    ];
    for (name, inputs, f) in cases {
        let err = grad_check(|t, v| f(t, v), &inputs, 1e-5).unwrap();
        assert!(err < 1e-5, "{name}: relative error {err}");
    }
}

#[test]
fn shape_mismatch_is_reported() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::<f64>::zeros(vec![2, 3]));
    let b = tape.leaf(Tensor::<f64>::zeros(vec![2, 3]));
    let err = tape.apply(Primitive::MatMul, &[a, b]).unwrap_err();
    assert!(matches!(err, DiffError::ShapeMismatch { .. }));
    let c = tape.leaf(Tensor::<f64>::zeros(vec![3, 2]));
    assert!(tape.apply(Primitive::Add, &[a, c]).is_err());
}

#[test]
fn log_of_non_positive_is_domain_error() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::row(vec![1.0f64, 0.0]));
    assert!(matches!(tape.apply(Primitive::Log, &[a]), Err(DiffError::Domain(_))));
    let b = tape.leaf(Tensor::row(vec![f64::NAN]));
    assert!(matches!(tape.apply(Primitive::Exp, &[b]), Err(DiffError::Domain(_))));
}

#[test]
fn backward_rejects_non_scalar_and_foreign_nodes() {
    let tape = Tape::new();
    let other = Tape::new();
    let a = tape.leaf(Tensor::row(vec![1.0f64, 2.0]));
    assert!(matches!(tape.backward(a), Err(DiffError::NonScalarLoss(_))));
    let foreign = other.scalar(1.0);
    assert!(matches!(tape.backward(foreign), Err(DiffError::ForeignNode(_))));
    let g = tape.backward(a.sum()).unwrap();
    assert!(g.wrt(foreign).is_err());
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&mut rng, vec![16, 32], -1.0, 1.0);
    let b = rand_tensor(&mut rng, vec![32, 8], -1.0, 1.0);
    let run = || {
        let tape = Tape::new();
        let y = tape.leaf(a.clone()).matmul(tape.leaf(b.clone())).softplus().logsumexp_rows();
        y.to_tensor()
    };
    assert_eq!(run().data(), run().data());
}

proptest! {
    #[test]
    fn gradient_of_sum_is_sum_of_gradients(xs in proptest::collection::vec(-3.0f64..3.0, 6)) {
        let x = Tensor::matrix(2, 3, xs).unwrap();
        let grad_of = |which: u8| {
            let tape = Tape::new();
            let v = tape.leaf(x.clone());
            let l1 = v.exp().sum();
            let l2 = v.softplus().square().mean();
            let loss = match which { 0 => l1, 1 => l2, _ => l1 + l2 };
            tape.backward(loss).unwrap().wrt(v).unwrap()
        };
        let (g1, g2, g12) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..6 {
            prop_assert!((g1.data()[i] + g2.data()[i] - g12.data()[i]).abs() < 1e-12);
        }
    }
}
