use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::diffengine::grad_check;

fn g1(mean: f64, var: f64) -> DiagGaussian<f64> {
    DiagGaussian::from_var(vec![mean], vec![var]).unwrap()
}

/// Direct 1-D normal log-density, written independently of the module.
fn normal_ln(x: f64, m: f64, var: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (x - m).powi(2) / (2.0 * var)
}

/// MC estimate of `E_q[ln q - ln p]` for 1-D normals: (mean, standard error).
fn mc_kl_1d(q: (f64, f64), p: (f64, f64), n: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let e: f64 = rng.sample(StandardNormal);
        let x = q.0 + q.1.sqrt() * e;
        let r = normal_ln(x, q.0, q.1) - normal_ln(x, p.0, p.1);
        s += r;
        s2 += r * r;
    }
    let m = s / n as f64;
    let var = (s2 / n as f64 - m * m) * n as f64 / (n as f64 - 1.0);
    (m, (var / n as f64).sqrt())
}

#[test]
fn kl_identical_is_zero() {
    let q = DiagGaussian::<f64>::standard(4);
    assert_eq!(kl_diag(&q, &q).unwrap(), 0.0);
}

#[test]
fn kl_shifted_mean_against_monte_carlo() {
    let (est, se) = mc_kl_1d((1.0, 1.0), (0.0, 1.0), 1_000_000, 11);
    let kl = kl_diag(&g1(1.0, 1.0), &g1(0.0, 1.0)).unwrap();
    assert!((kl - 0.5).abs() < 1e-12);
    assert!((kl - est).abs() < 3.0 * se, "kl {kl} mc {est} se {se}");
}

#[test]
fn kl_wider_variance_against_monte_carlo() {
    let (est, se) = mc_kl_1d((0.0, 4.0), (0.0, 1.0), 1_000_000, 12);
    let kl = kl_diag(&g1(0.0, 4.0), &g1(0.0, 1.0)).unwrap();
    let hand = (0.5f64).ln() + 2.0 - 0.5;
    assert!((kl - hand).abs() < 1e-12);
    assert!((kl - 0.8069).abs() < 1e-4);
    assert!((kl - est).abs() < 3.0 * se, "kl {kl} mc {est} se {se}");
}

#[test]
fn kl_dimension_mismatch() {
    let err = kl_diag(&DiagGaussian::<f64>::standard(2), &DiagGaussian::standard(3)).unwrap_err();
    assert_eq!(err, GaussError::Dimension(2, 3));
}

#[test]
fn reparam_sample_cases() {
    let q = DiagGaussian::new(vec![1.5f64, -2.0], vec![0.3, -1.0]).unwrap();
    assert_eq!(reparam_sample(&q, &[0.0, 0.0]).unwrap(), vec![1.5, -2.0]);
    let std = DiagGaussian::<f64>::standard(3);
    assert_eq!(reparam_sample(&std, &[0.1, -0.4, 2.0]).unwrap(), vec![0.1, -0.4, 2.0]);
    assert!(reparam_sample(&q, &[0.0]).is_err());

    let q = g1(2.0, 0.25);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let mean: f64 = (0..n)
        .map(|_| reparam_sample(&q, &[rng.sample(StandardNormal)]).unwrap()[0])
        .sum::<f64>()
        / n as f64;
    assert!((mean - 2.0).abs() < 2.0 * 0.5 / (n as f64).sqrt(), "{mean}");
}

/// Grid-renormalized log-density of `prod_k N(x)^{w_k}` on `[lo, hi]`.
fn grid_geometric_mean(comps: &[(f64, f64)], w: &[f64], lo: f64, hi: f64, step: f64) -> Vec<(f64, f64)> {
    let n = ((hi - lo) / step).round() as usize;
    let pts: Vec<f64> = (0..=n).map(|i| lo + i as f64 * step).collect();
    let unnorm: Vec<f64> = pts
        .iter()
        .map(|&x| comps.iter().zip(w).map(|(&(m, v), wk)| wk * normal_ln(x, m, v)).sum())
        .collect();
    let mx = unnorm.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = unnorm.iter().map(|u| (u - mx).exp()).sum::<f64>() * step;
    let log_z = mx + z.ln();
    pts.into_iter().zip(unnorm).map(|(x, u)| (x, u - log_z)).collect()
}

#[test]
fn poe_identical_inputs() {
    let q = DiagGaussian::new(vec![0.4f64, -1.0], vec![0.2, -0.7]).unwrap();
    let out = poe_geometric_mean(&[q.clone(), q.clone(), q.clone()], &[0.2, 0.5, 0.3]).unwrap();
    for i in 0..2 {
        assert!((out.mean()[i] - q.mean()[i]).abs() < 1e-12);
        assert!((out.log_var()[i] - q.log_var()[i]).abs() < 1e-12);
    }
}

#[test]
fn poe_two_unit_normals_against_grid() {
    let out = poe_geometric_mean(&[g1(0.0, 1.0), g1(2.0, 1.0)], &[0.5, 0.5]).unwrap();
    assert!((out.mean()[0] - 1.0).abs() < 1e-12);
    assert!(out.log_var()[0].abs() < 1e-12);
    let grid = grid_geometric_mean(&[(0.0, 1.0), (2.0, 1.0)], &[0.5, 0.5], -10.0, 10.0, 1e-3);
    let worst = grid
        .iter()
        .map(|&(x, l)| (l - normal_ln(x, 1.0, 1.0)).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn poe_degenerate_weight_returns_first() {
    let a = DiagGaussian::new(vec![0.3f64], vec![0.9]).unwrap();
    let b = DiagGaussian::new(vec![-4.0f64], vec![-2.0]).unwrap();
    let out = poe_geometric_mean(&[a.clone(), b], &[1.0, 0.0]).unwrap();
    assert_eq!(out, a);
}

#[test]
fn poe_errors() {
    assert_eq!(poe_geometric_mean::<f64>(&[], &[]).unwrap_err(), GaussError::Empty);
    let a = g1(0.0, 1.0);
    assert!(matches!(
        poe_geometric_mean(&[a.clone(), a], &[0.5, 0.6]),
        Err(GaussError::Weights(_))
    ));
}

#[test]
fn poe_matches_grid_for_random_configurations() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let k = rng.random_range(1..5);
        let comps: Vec<(f64, f64)> = (0..k)
            .map(|_| (rng.random_range(-3.0..3.0), rng.random_range(0.2..3.0)))
            .collect();
        let w = renormalize(&(0..k).map(|_| rng.random_range(0.05..1.0)).collect::<Vec<_>>());
        let dists: Vec<_> = comps.iter().map(|&(m, v)| g1(m, v)).collect();
        let out = poe_geometric_mean(&dists, &w).unwrap();
        let (m, v) = (out.mean()[0], out.var()[0]);
        let grid = grid_geometric_mean(&comps, &w, -30.0, 30.0, 1e-3);
        let worst = grid
            .iter()
            .map(|&(x, l)| (l - normal_ln(x, m, v)).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "{comps:?} {w:?}: {worst}");
    }
}

#[test]
fn logpdf_values_and_normalization() {
    let q = DiagGaussian::<f64>::standard(1);
    let c = -0.5 * (2.0 * std::f64::consts::PI).ln();
    assert!((gaussian_logpdf(&q, &[0.0]).unwrap() - c).abs() < 1e-15);
    assert!((c + 0.9189).abs() < 1e-4);
    assert!((gaussian_logpdf(&q, &[1.0]).unwrap() - (c - 0.5)).abs() < 1e-15);

    let step = 1e-3;
    let integral: f64 = (0..=16_000)
        .map(|i| gaussian_logpdf(&q, &[-8.0 + i as f64 * step]).unwrap().exp() * step)
        .sum();
    assert!((integral - 1.0).abs() < 1e-4, "{integral}");
    assert!(gaussian_logpdf(&q, &[0.0, 1.0]).is_err());
}

#[test]
fn mixture_logpdf_cases() {
    let a = DiagGaussian::new(vec![0.5f64, -0.2], vec![0.1, 0.3]).unwrap();
    let x = [0.1, 0.7];
    let single = mixture_logpdf(std::slice::from_ref(&a), &[1.0], &x).unwrap();
    assert!((single - gaussian_logpdf(&a, &x).unwrap()).abs() < 1e-14);
    let twin = mixture_logpdf(&[a.clone(), a.clone()], &[0.5, 0.5], &x).unwrap();
    assert!((twin - single).abs() < 1e-14);

    let direct = (0.5 * normal_ln(2.0, 0.0, 1.0).exp() + 0.5 * normal_ln(2.0, 4.0, 1.0).exp()).ln();
    let mix = mixture_logpdf(&[g1(0.0, 1.0), g1(4.0, 1.0)], &[0.5, 0.5], &[2.0]).unwrap();
    assert!((mix - direct).abs() < 1e-14);
    assert!(mixture_logpdf(std::slice::from_ref(&a), &[0.9], &x).is_err());
}

#[test]
fn frechet_cases() {
    let a = Moments { mean: vec![0.0, 1.0], std: vec![1.0, 2.0] };
    assert_eq!(frechet_gaussian_distance(&a, &a).unwrap(), 0.0);
    let b = Moments { mean: vec![1.0, 1.0], std: vec![1.0, 2.0] };
    assert_eq!(frechet_gaussian_distance(&a, &b).unwrap(), 1.0);
    assert_eq!(Moments::from_samples(&[vec![1.0]]).unwrap_err(), GaussError::TooFewSamples(1));

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut draw = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                (0..5)
                    .map(|d| d as f64 + (0.5 + 0.1 * d as f64) * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    };
    let m1 = Moments::from_samples(&draw(10_000)).unwrap();
    let m2 = Moments::from_samples(&draw(10_000)).unwrap();
    assert!(frechet_gaussian_distance(&m1, &m2).unwrap() < 0.05);
}

#[test]
fn kl_gradient_check_through_tape() {
    let q_mean = Tensor::matrix(2, 3, vec![0.3, -0.5, 1.2, 0.0, 0.8, -1.1]).unwrap();
    let q_lv = Tensor::matrix(2, 3, vec![0.2, -0.4, 0.9, -1.0, 0.1, 0.5]).unwrap();
    let p = DiagGaussian::new(vec![0.1, 0.2, -0.3], vec![0.4, -0.2, 0.1]).unwrap();
    let err = grad_check(
        |t, v| {
            let q = GaussVar { mean: v[0], log_var: v[1] };
            let pv = GaussVar::from_gaussians(t, &[p.clone(), p.clone()]);
            q.kl_rows(&pv).sum()
        },
        &[q_mean.clone(), q_lv.clone()],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn tape_ops_agree_with_detached_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut rand_g = |d: usize| {
        DiagGaussian::new(
            (0..d).map(|_| rng.random_range(-2.0f64..2.0)).collect(),
            (0..d).map(|_| rng.random_range(-1.0f64..1.0)).collect(),
        )
        .unwrap()
    };
    let (a, b, c) = (rand_g(3), rand_g(3), rand_g(3));
    let tape = Tape::new();
    let av = GaussVar::from_gaussians(&tape, std::slice::from_ref(&a));
    let bv = GaussVar::from_gaussians(&tape, std::slice::from_ref(&b));
    let cv = GaussVar::from_gaussians(&tape, std::slice::from_ref(&c));

    let kl = av.kl_rows(&bv).item();
    assert!((kl - kl_diag(&a, &b).unwrap()).abs() < 1e-12);
    let kl0 = av.kl_standard_rows().item();
    assert!((kl0 - kl_diag(&a, &DiagGaussian::standard(3)).unwrap()).abs() < 1e-12);

    let x = [0.3, -0.1, 0.9];
    let xv = tape.leaf(Tensor::row(x.to_vec()));
    assert!((av.logpdf_rows(xv).item() - gaussian_logpdf(&a, &x).unwrap()).abs() < 1e-12);
    let mix = mixture_logpdf_rows(&[(av, 0.2), (bv, 0.8)], xv).item();
    assert!((mix - mixture_logpdf(&[a.clone(), b.clone()], &[0.2, 0.8], &x).unwrap()).abs() < 1e-12);

    let fused = GaussVar::poe(&[(av, 0.25), (bv, 0.25), (cv, 0.25)], 0.25).row(0);
    let want = poe_geometric_mean(&[a, b, c, DiagGaussian::standard(3)], &[0.25; 4]).unwrap();
    for i in 0..3 {
        assert!((fused.mean()[i] - want.mean()[i]).abs() < 1e-12);
        assert!((fused.log_var()[i] - want.log_var()[i]).abs() < 1e-12);
    }
}

fn arb_gauss(d: usize) -> impl Strategy<Value = DiagGaussian<f64>> {
    (
        proptest::collection::vec(-5.0f64..5.0, d),
        proptest::collection::vec(-4.0f64..4.0, d),
    )
        .prop_map(|(m, lv)| DiagGaussian::new(m, lv).unwrap())
}

proptest! {
    #[test]
    fn kl_is_non_negative(q in arb_gauss(4), p in arb_gauss(4)) {
        prop_assert!(kl_diag(&q, &p).unwrap() >= 0.0);
        prop_assert_eq!(kl_diag(&q, &q).unwrap(), 0.0);
    }

    #[test]
    fn mixture_is_permutation_invariant(
        comps in proptest::collection::vec(arb_gauss(2), 3),
        raw in proptest::collection::vec(0.05f64..1.0, 3),
        x in proptest::collection::vec(-3.0f64..3.0, 2),
    ) {
        let w = renormalize(&raw);
        let a = mixture_logpdf(&comps, &w, &x).unwrap();
        let perm = [2, 0, 1];
        let pc: Vec<_> = perm.iter().map(|&i| comps[i].clone()).collect();
        let pw: Vec<_> = perm.iter().map(|&i| w[i]).collect();
        let b = mixture_logpdf(&pc, &pw, &x).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }
}
