use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffengine::grad_check;

fn specs() -> Vec<ModalitySpec> {
    vec![
        ModalitySpec {
            name: "a".into(),
            element_count: 6,
            likelihood: Likelihood::Gaussian { scale: 1.0 },
            hidden: vec![8],
        },
        ModalitySpec {
            name: "b".into(),
            element_count: 5,
            likelihood: Likelihood::Laplace { scale: 0.5 },
            hidden: vec![7, 6],
        },
        ModalitySpec {
            name: "c".into(),
            element_count: 12,
            likelihood: Likelihood::Categorical { alphabet: 4 },
            hidden: vec![],
        },
    ]
}

fn model(s_dim: usize) -> MultimodalVAE<f64> {
    MultimodalVAE::new(specs(), LatentPartition::uniform(3, s_dim, 3), 11).unwrap()
}

fn batch(n: usize, seed: u64) -> ModalityBatch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = normal_tensor(&mut rng, n, 6);
    let b = normal_tensor(&mut rng, n, 5);
    let mut c = Tensor::zeros(vec![n, 12]);
    for (r, chunk) in c.data_mut().chunks_mut(4).enumerate() {
        chunk[(r * 7 + seed as usize) % 4] = 1.0;
    }
    ModalityBatch::complete(vec![a, b, c], vec![]).unwrap()
}

#[test]
fn encoder_outputs_follow_partition() {
    let m = MultimodalVAE::<f64>::new(specs(), LatentPartition::new(3, vec![2, 0, 4]), 1).unwrap();
    let b = batch(5, 1);
    for (j, s) in [2, 0, 4].into_iter().enumerate() {
        let (c, st) = m.encode(j, b.data(j)).unwrap();
        assert_eq!((c.len(), c.dim()), (5, 3));
        assert_eq!((st.len(), st.dim()), (5, s));
        assert!(c.mean.all_finite() && c.log_var.all_finite());
    }
    assert!(m.params().iter().all(|p| p.all_finite()));
    let err = m.encode(0, b.data(1)).unwrap_err();
    assert_eq!(
        err,
        ModelError::Shape {
            modality: 0,
            expected: 6,
            got: 5
        }
    );
}

#[test]
fn identical_inputs_give_identical_posteriors() {
    let m = model(2);
    let x = batch(1, 3).data(0).clone();
    let twice = Tensor::matrix(2, 6, [x.data(), x.data()].concat()).unwrap();
    let (c, s) = m.encode(0, &twice).unwrap();
    assert_eq!(c.mean.row_slice(0), c.mean.row_slice(1));
    assert_eq!(s.log_var.row_slice(0), s.log_var.row_slice(1));
}

#[test]
fn init_is_seeded_and_bounded() {
    let a = model(2);
    let b = model(2);
    assert_eq!(a, b);
    let c = MultimodalVAE::<f64>::new(specs(), LatentPartition::uniform(3, 2, 3), 12).unwrap();
    assert_ne!(a.params(), c.params());
    for (name, p) in a.param_names().iter().zip(a.params()) {
        let fan_in = if name.ends_with(".w") { p.shape()[0] } else { 0 };
        if fan_in > 0 {
            let bound = 1.0 / (fan_in as f64).sqrt();
            assert!(p.data().iter().all(|v| v.abs() <= bound), "{name}");
        }
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let mut s = specs();
    s[2].likelihood = Likelihood::Categorical { alphabet: 1 };
    assert!(matches!(
        MultimodalVAE::<f64>::new(s, LatentPartition::uniform(3, 0, 3), 0),
        Err(ModelError::Spec(_))
    ));
    let mut s = specs();
    s[0].element_count = 0;
    assert!(MultimodalVAE::<f64>::new(s, LatentPartition::uniform(3, 0, 3), 0).is_err());
    assert!(matches!(
        MultimodalVAE::<f64>::new(specs(), LatentPartition::uniform(3, 0, 2), 0),
        Err(ModelError::Partition(_))
    ));
    let b = batch(2, 0);
    assert_eq!(b.with_mask(vec![false; 3]).unwrap_err(), ModelError::EmptyMask);
}

#[test]
fn from_params_round_trips_and_checks_layout() {
    let m = model(2);
    let named: Vec<_> = m.param_names().iter().cloned().zip(m.params().iter().cloned()).collect();
    let back = MultimodalVAE::from_params(specs(), m.partition().clone(), named.clone()).unwrap();
    assert_eq!(back, m);
    let mut wrong = named;
    wrong.swap(0, 1);
    assert!(MultimodalVAE::from_params(specs(), m.partition().clone(), wrong).is_err());
}

#[test]
fn single_modality_poe_is_that_posterior() {
    let m = model(2);
    let b = batch(4, 5);
    for j in 0..3 {
        let mut mask = vec![false; 3];
        mask[j] = true;
        let JointPosterior::Gaussian(g) = m.infer_joint(&b, &mask, Fusion::Poe { prior_expert: false }).unwrap() else {
            panic!("poe gives a gaussian")
        };
        let (c, _) = m.encode(j, b.data(j)).unwrap();
        assert_eq!(g, c);
    }
}

#[test]
fn poe_with_equal_variances_averages_means() {
    let tape = Tape::new();
    let a = GaussianBatch::<f64> {
        mean: Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap(),
        log_var: Tensor::matrix(1, 2, vec![0.3, 0.3]).unwrap(),
    };
    let b = GaussianBatch::<f64> {
        mean: Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap(),
        log_var: Tensor::matrix(1, 2, vec![0.3, 0.3]).unwrap(),
    };
    let fused = fuse_poe(&[a.on(&tape), b.on(&tape)], false).detach();
    assert!((fused.mean.get(0, 0) - 2.0).abs() < 1e-12);
    assert!((fused.mean.get(0, 1) - 1.0).abs() < 1e-12);
    // uniform weights 1/2 each: precision 2 * 0.5 / var, so the variance is unchanged
    assert!((fused.log_var.get(0, 0) - 0.3).abs() < 1e-12);
    let with_prior = fuse_poe(&[a.on(&tape), b.on(&tape)], true).detach();
    let prec = (2.0 * (-0.3f64).exp() + 1.0) / 3.0;
    assert!((with_prior.log_var.get(0, 1) + prec.ln()).abs() < 1e-12);
}

#[test]
fn fusion_is_invariant_to_modality_order() {
    let m = model(0);
    let b = batch(3, 9);
    let parts: Vec<_> = (0..3).map(|j| m.encode(j, b.data(j)).unwrap().0).collect();
    let tape = Tape::new();
    let vars: Vec<_> = parts.iter().map(|p| p.on(&tape)).collect();
    let rev: Vec<_> = vars.iter().rev().copied().collect();
    for prior in [false, true] {
        let x = fuse_poe(&vars, prior).detach();
        let y = fuse_poe(&rev, prior).detach();
        for (u, v) in x.mean.data().iter().zip(y.mean.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
    let fwd = JointPosterior::Mixture(parts.clone()).mean();
    let back = JointPosterior::Mixture(parts.into_iter().rev().collect()).mean();
    for (u, v) in fwd.data().iter().zip(back.data()) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn conditional_generation_shapes_and_determinism() {
    let m = model(2);
    let b = batch(4, 2);
    for mask in [vec![true; 3], vec![true, false, false], vec![false, true, true]] {
        let gen = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            m.conditional_generate(&b, &mask, Fusion::Poe { prior_expert: true }, &mut rng)
                .unwrap()
        };
        let x = gen(1);
        assert_eq!(x, gen(1));
        for (j, t) in x.iter().enumerate() {
            assert_eq!(t.shape(), b.data(j).shape());
        }
        for row in x[2].data().chunks(4) {
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(
        m.conditional_generate(&b, &[false; 3], Fusion::Moe, &mut rng).unwrap_err(),
        ModelError::EmptyMask
    );
}

#[test]
fn random_generation_shapes_and_determinism() {
    let m = model(2);
    let gen = |seed| m.random_generate(7, &mut ChaCha8Rng::seed_from_u64(seed));
    let x = gen(4);
    assert_eq!(x, gen(4));
    assert_ne!(x, gen(5));
    for (t, s) in x.iter().zip(m.specs()) {
        assert_eq!(t.shape(), &[7, s.element_count]);
        assert!(t.all_finite());
    }
}

#[test]
fn categorical_likelihood_is_log_softmax() {
    let m = model(0);
    let tape = Tape::new();
    let bound = m.bind(&tape);
    let logits = Tensor::matrix(1, 12, (0..12).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
    let x = batch(1, 0).data(2).clone();
    let ll = bound.log_likelihood_rows(2, tape.leaf(logits.clone()), tape.leaf(x.clone())).item();
    let mut want = 0.0;
    for (l, o) in logits.data().chunks(4).zip(x.data().chunks(4)) {
        let lse = crate::diffengine::logsumexp(l);
        want += l.iter().zip(o).map(|(a, b)| b * (a - lse)).sum::<f64>();
    }
    assert!((ll - want).abs() < 1e-12);
}

#[test]
fn continuous_likelihoods_match_densities() {
    let m = model(0);
    let tape = Tape::new();
    let bound = m.bind(&tape);
    let out = Tensor::matrix(1, 6, vec![0.1, 0.2, -0.3, 0.0, 1.0, 0.5]).unwrap();
    let x = Tensor::matrix(1, 6, vec![0.0, 0.4, -0.1, 0.2, 0.8, 0.5]).unwrap();
    let g = bound.log_likelihood_rows(0, tape.leaf(out.clone()), tape.leaf(x.clone())).item();
    let want: f64 = out
        .data()
        .iter()
        .zip(x.data())
        .map(|(m, v)| -0.5 * (v - m).powi(2) - 0.5 * (2.0 * std::f64::consts::PI).ln())
        .sum();
    assert!((g - want).abs() < 1e-12);
    let out5 = out.select_rows(&[0]).map(|v| v * 2.0);
    let out5 = Tensor::matrix(1, 5, out5.data()[..5].to_vec()).unwrap();
    let x5 = Tensor::matrix(1, 5, x.data()[..5].to_vec()).unwrap();
    let l = bound.log_likelihood_rows(1, tape.leaf(out5.clone()), tape.leaf(x5.clone())).item();
    let want: f64 = out5.data().iter().zip(x5.data()).map(|(m, v)| -(v - m).abs() / 0.5 - 1f64.ln()).sum();
    assert!((l - want).abs() < 1e-12);
}

#[test]
fn encode_decode_gradients_match_finite_differences() {
    let m = model(2);
    let b = batch(3, 4);
    let params = m.params().to_vec();
    for j in 0..3 {
        let x = b.data(j).clone();
        let err = grad_check(
            |tape, vars| {
                let bound = m.bind_vars(tape, vars.to_vec()).unwrap();
                let post = bound.encode(j, tape.leaf(x.clone()));
                let out = bound.decode(j, post.content.mean, post.style.mean);
                let ll = bound.log_likelihood_rows(j, out, tape.leaf(x.clone()));
                ll.sum() + post.content.log_var.sum() + post.style.log_var.square().sum()
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "modality {j}: {err}");
    }
}
