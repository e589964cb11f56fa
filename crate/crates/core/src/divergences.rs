//! Generalized Jensen-Shannon divergences over `M` posteriors plus a fixed
//! prior, and the Jensen upper bound on mixture KL.
//!
//! All values are in nats. Monte-Carlo estimators report a standard error so
//! inequality checks can be tolerance-scaled.

use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::gaussians::{
    check_weights, gaussian_logpdf, kl_diag, mixture_logpdf, poe_geometric_mean, DiagGaussian,
    DistributionWeights, GaussError,
};
use ziggurat::Ziggurat;

/// Fewest samples the JS Monte-Carlo estimator accepts.
pub const MIN_MC_SAMPLES: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DivergenceError {
    #[error(transparent)]
    Gauss(#[from] GaussError),
    #[error("{got} Monte-Carlo samples requested, need at least {min}")]
    TooFewSamples { got: usize, min: usize },
    #[error("{weights} weights for {dists} distributions")]
    WeightCount { weights: usize, dists: usize },
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub stderr: f64,
}

/// Running mean/variance accumulator (Welford).
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct Running {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Running {
    pub(crate) fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    pub(crate) fn mean(&self) -> f64 {
        self.mean
    }

    /// Variance of the mean.
    pub(crate) fn var_of_mean(&self) -> f64 {
        if self.n < 2.0 {
            0.0
        } else {
            self.m2 / (self.n - 1.0) / self.n
        }
    }

    pub(crate) fn estimate(&self) -> McEstimate {
        McEstimate {
            value: self.mean,
            stderr: self.var_of_mean().sqrt(),
        }
    }
}

fn draw<R: Rng + ?Sized>(q: &DiagGaussian<f64>, rng: &mut R, buf: &mut Vec<f64>) {
    buf.clear();
    for (m, s) in q.mean().iter().zip(q.std()) {
        let e: f64 = rng.sample(StandardNormal);
        buf.push(m + s * e);
    }
}

fn all_components(dists: &[DiagGaussian<f64>], prior: &DiagGaussian<f64>) -> Vec<DiagGaussian<f64>> {
    let mut all = dists.to_vec();
    all.push(prior.clone());
    all
}

fn check_m_plus_one(dists: &[DiagGaussian<f64>], weights: &DistributionWeights) -> Result<(), DivergenceError> {
    if weights.len() != dists.len() + 1 {
        return Err(DivergenceError::WeightCount {
            weights: weights.len(),
            dists: dists.len(),
        });
    }
    Ok(())
}

/// Monte-Carlo JS divergence under the arithmetic mean:
/// `sum_k pi_k KL(q_k || sum_i pi_i q_i)` over the `M` posteriors and the prior.
///
/// Each term uses `samples` draws from its own `q_k`; terms with zero weight
/// are skipped.
pub fn js_arithmetic_mc<R: Rng + ?Sized>(
    dists: &[DiagGaussian<f64>],
    prior: &DiagGaussian<f64>,
    weights: &DistributionWeights,
    samples: usize,
    rng: &mut R,
) -> Result<McEstimate, DivergenceError> {
    check_m_plus_one(dists, weights)?;
    if samples < MIN_MC_SAMPLES {
        return Err(DivergenceError::TooFewSamples {
            got: samples,
            min: MIN_MC_SAMPLES,
        });
    }
    let all = all_components(dists, prior);
    let pi = weights.as_slice();
    let mut value = 0.0;
    let mut var = 0.0;
    let mut x = Vec::new();
    for (q, &w) in all.iter().zip(pi) {
        if w == 0.0 {
            continue;
        }
        if q.dim() != prior.dim() {
            return Err(GaussError::Dimension(q.dim(), prior.dim()).into());
        }
        let mut acc = Running::default();
        for _ in 0..samples {
            draw(q, rng, &mut x);
            acc.push(gaussian_logpdf(q, &x)? - mixture_logpdf(&all, pi, &x)?);
        }
        value += w * acc.mean();
        var += w * w * acc.var_of_mean();
    }
    Ok(McEstimate {
        value,
        stderr: var.sqrt(),
    })
}

/// Closed-form JS divergence under the geometric mean: every distribution is
/// compared to their weighted normalized geometric mean.
pub fn js_geometric_closed(
    dists: &[DiagGaussian<f64>],
    prior: &DiagGaussian<f64>,
    weights: &DistributionWeights,
) -> Result<f64, DivergenceError> {
    check_m_plus_one(dists, weights)?;
    let all = all_components(dists, prior);
    let center = poe_geometric_mean(&all, weights.as_slice())?;
    let mut total = 0.0;
    for (q, &w) in all.iter().zip(weights.as_slice()) {
        if w > 0.0 {
            total += w * kl_diag(q, &center)?;
        }
    }
    Ok(total)
}

/// `sum_j w_j KL(q_j || prior)`, the Jensen upper bound on `KL(sum_j w_j q_j || prior)`.
/// `weights` must sum to one over the `M` posteriors.
pub fn mixture_kl_jensen_bound(
    dists: &[DiagGaussian<f64>],
    weights: &[f64],
    prior: &DiagGaussian<f64>,
) -> Result<f64, DivergenceError> {
    if weights.len() != dists.len() {
        return Err(DivergenceError::WeightCount {
            weights: weights.len(),
            dists: dists.len(),
        });
    }
    check_weights(weights)?;
    let mut total = 0.0;
    for (q, &w) in dists.iter().zip(weights) {
        if w > 0.0 {
            total += w * kl_diag(q, prior)?;
        }
    }
    Ok(total)
}

/// Monte-Carlo estimate of `KL(sum_j w_j q_j || prior)`, drawing a mixture
/// component per sample.
pub fn mixture_kl_mc<R: Rng + ?Sized>(
    dists: &[DiagGaussian<f64>],
    weights: &[f64],
    prior: &DiagGaussian<f64>,
    samples: usize,
    rng: &mut R,
) -> Result<McEstimate, DivergenceError> {
    if weights.len() != dists.len() {
        return Err(DivergenceError::WeightCount {
            weights: weights.len(),
            dists: dists.len(),
        });
    }
    check_weights(weights)?;
    if samples < 2 {
        return Err(DivergenceError::TooFewSamples { got: samples, min: 2 });
    }
    let mut acc = Running::default();
    let mut x = Vec::new();
    for _ in 0..samples {
        let k = pick(weights, rng.random::<f64>());
        draw(&dists[k], rng, &mut x);
        acc.push(mixture_logpdf(dists, weights, &x)? - gaussian_logpdf(prior, &x)?);
    }
    Ok(acc.estimate())
}

/// Monte-Carlo estimate of `KL(q || p)` for two diagonal Gaussians.
///
/// Draws come from a fast generator seeded from `rng`, two normals per word.
pub fn kl_mc<R: Rng + ?Sized>(
    q: &DiagGaussian<f64>,
    p: &DiagGaussian<f64>,
    samples: usize,
    rng: &mut R,
) -> Result<McEstimate, DivergenceError> {
    if q.dim() != p.dim() {
        return Err(GaussError::Dimension(q.dim(), p.dim()).into());
    }
    if samples < 2 {
        return Err(DivergenceError::TooFewSamples { got: samples, min: 2 });
    }
    // log q(x) - log p(x) with x = mu_q + s_q e is base + sum_i c0 + c1 e_i + c2 e_i^2
    let sq = q.std();
    let sp = p.std();
    let base: f64 = (0..q.dim()).map(|i| sp[i].ln() - sq[i].ln()).sum();
    let coef: Vec<(f64, f64, f64)> = (0..q.dim())
        .map(|i| {
            let shift = (q.mean()[i] - p.mean()[i]) / sp[i];
            let gain = sq[i] / sp[i];
            (0.5 * shift * shift, shift * gain, 0.5 * (gain * gain - 1.0))
        })
        .collect();
    let zig = Ziggurat::get();
    let mut gen = SmallRng::seed_from_u64(rng.random());
    let mut draw_pair = || {
        let (mut a, mut b) = (0.0, 0.0);
        for &(c0, c1, c2) in &coef {
            let (e, f) = zig.pair(&mut gen);
            a += c0 + e * (c1 + c2 * e);
            b += c0 + f * (c1 + c2 * f);
        }
        (a, b)
    };
    // sums are taken around the first draw to keep the variance well conditioned
    let (first, second) = draw_pair();
    let (mut sum, mut sum2) = (second - first, (second - first).powi(2));
    for _ in 1..samples / 2 {
        let (a, b) = draw_pair();
        let (a, b) = (a - first, b - first);
        sum += a + b;
        sum2 += a * a + b * b;
    }
    if samples % 2 == 1 {
        let a = draw_pair().0 - first;
        sum += a;
        sum2 += a * a;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = ((sum2 - n * mean * mean).max(0.0) / (n - 1.0)) / n;
    Ok(McEstimate {
        value: base + first + mean,
        stderr: var.sqrt(),
    })
}

/// Index drawn from a categorical distribution given `u ~ U[0, 1)`.
pub(crate) fn pick(weights: &[f64], u: f64) -> usize {
    let mut c = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        last = i;
        c += w;
        if u < c {
            return i;
        }
    }
    last
}

mod ziggurat;
