//! Diagonal-Gaussian algebra: densities, sampling, closed-form KL and
//! abstract-mean fusion (arithmetic mixture, normalized geometric mean).
//!
//! [`DiagGaussian`] is a single detached distribution used by oracles and
//! evaluation. [`GaussVar`] is a batch of distributions living on a tape, one
//! per row, used inside differentiable objectives.

use thiserror::Error;

use crate::diffengine::{logsumexp, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Log-variance bounds applied by encoders before building a Gaussian.
pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Tolerance on the sum of a weight vector.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaussError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("non-finite parameter")]
    NonFinite,
    #[error("no distributions given")]
    Empty,
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error("need at least 2 samples for moments, got {0}")]
    TooFewSamples(usize),
}

/// Diagonal-covariance Gaussian parameterized by mean and log-variance.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian<T> {
    mean: Vec<T>,
    log_var: Vec<T>,
}

impl<T: Scalar> DiagGaussian<T> {
    pub fn new(mean: Vec<T>, log_var: Vec<T>) -> Result<Self, GaussError> {
        if mean.len() != log_var.len() {
            return Err(GaussError::Dimension(mean.len(), log_var.len()));
        }
        if mean.iter().chain(&log_var).any(|x| !x.is_finite()) {
            return Err(GaussError::NonFinite);
        }
        Ok(Self { mean, log_var })
    }

    /// From mean and variance.
    pub fn from_var(mean: Vec<T>, var: Vec<T>) -> Result<Self, GaussError> {
        Self::new(mean, var.into_iter().map(|v| v.ln()).collect())
    }

    /// `N(0, I)` of dimension `dim`.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![T::zero(); dim],
            log_var: vec![T::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn log_var(&self) -> &[T] {
        &self.log_var
    }

    pub fn var(&self) -> Vec<T> {
        self.log_var.iter().map(|lv| lv.exp()).collect()
    }

    pub fn std(&self) -> Vec<T> {
        self.log_var.iter().map(|&lv| (lv * T::lit(0.5)).exp()).collect()
    }
}

/// The `M + 1` distribution weights of the generalized JS divergence.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionWeights {
    pi: Vec<f64>,
}

impl DistributionWeights {
    pub fn new(pi: Vec<f64>) -> Result<Self, GaussError> {
        if pi.len() < 2 {
            return Err(GaussError::Weights(format!("need at least 2 entries, got {}", pi.len())));
        }
        check_weights(&pi)?;
        Ok(Self { pi })
    }

    pub fn uniform(n: usize) -> Result<Self, GaussError> {
        Self::new(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.pi
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    /// Weight of the fixed (last) distribution.
    pub fn prior_weight(&self) -> f64 {
        self.pi[self.pi.len() - 1]
    }

    /// The first `len - 1` weights rescaled to sum to one.
    pub fn prefix_renormalized(&self) -> Vec<f64> {
        renormalize(&self.pi[..self.pi.len() - 1])
    }
}

/// Rescales non-negative weights to sum to one; an all-zero input maps to uniform.
pub fn renormalize(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        w.iter().map(|x| x / s).collect()
    } else {
        vec![1.0 / w.len() as f64; w.len()]
    }
}

pub(crate) fn check_weights(w: &[f64]) -> Result<(), GaussError> {
    if w.is_empty() {
        return Err(GaussError::Empty);
    }
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(GaussError::Weights("entries must be finite and non-negative".into()));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(GaussError::Weights(format!("sum is {s}, expected 1")));
    }
    Ok(())
}

fn same_dim<T: Scalar>(a: &DiagGaussian<T>, b: &DiagGaussian<T>) -> Result<(), GaussError> {
    if a.dim() == b.dim() {
        Ok(())
    } else {
        Err(GaussError::Dimension(a.dim(), b.dim()))
    }
}

/// `KL(q || p)` in nats, closed form.
pub fn kl_diag<T: Scalar>(q: &DiagGaussian<T>, p: &DiagGaussian<T>) -> Result<T, GaussError> {
    same_dim(q, p)?;
    let half = T::lit(0.5);
    let mut acc = T::zero();
    for i in 0..q.dim() {
        let (mq, lq) = (q.mean[i], q.log_var[i]);
        let (mp, lp) = (p.mean[i], p.log_var[i]);
        let d = mq - mp;
        acc = acc + half * (lp - lq + ((lq - lp).exp() + d * d * (-lp).exp()) - T::one());
    }
    Ok(acc.max(T::zero()))
}

/// `mean + exp(log_var / 2) * noise`.
pub fn reparam_sample<T: Scalar>(q: &DiagGaussian<T>, noise: &[T]) -> Result<Vec<T>, GaussError> {
    if noise.len() != q.dim() {
        return Err(GaussError::Dimension(q.dim(), noise.len()));
    }
    let half = T::lit(0.5);
    Ok((0..q.dim())
        .map(|i| q.mean[i] + (q.log_var[i] * half).exp() * noise[i])
        .collect())
}

/// Normalized weighted geometric mean of Gaussians.
///
/// Precision is `sum_k w_k / var_k` and the mean is the precision-weighted
/// average of the component means. Components with zero weight are skipped.
pub fn poe_geometric_mean<T: Scalar>(
    dists: &[DiagGaussian<T>],
    weights: &[f64],
) -> Result<DiagGaussian<T>, GaussError> {
    let first = dists.first().ok_or(GaussError::Empty)?;
    if weights.len() != dists.len() {
        return Err(GaussError::Weights(format!(
            "{} weights for {} distributions",
            weights.len(),
            dists.len()
        )));
    }
    check_weights(weights)?;
    let d = first.dim();
    let mut precision = vec![T::zero(); d];
    let mut weighted_mean = vec![T::zero(); d];
    for (q, &w) in dists.iter().zip(weights) {
        same_dim(first, q)?;
        if w == 0.0 {
            continue;
        }
        let w = T::lit(w);
        for i in 0..d {
            let p = w * (-q.log_var[i]).exp();
            precision[i] = precision[i] + p;
            weighted_mean[i] = weighted_mean[i] + p * q.mean[i];
        }
    }
    let mean = (0..d).map(|i| weighted_mean[i] / precision[i]).collect();
    let log_var = precision.iter().map(|p| -p.ln()).collect();
    DiagGaussian::new(mean, log_var)
}

/// Exact log-density.
pub fn gaussian_logpdf<T: Scalar>(q: &DiagGaussian<T>, x: &[T]) -> Result<T, GaussError> {
    if x.len() != q.dim() {
        return Err(GaussError::Dimension(q.dim(), x.len()));
    }
    let half = T::lit(0.5);
    let ln_2pi = T::lit((2.0 * std::f64::consts::PI).ln());
    let mut acc = T::zero();
    for i in 0..q.dim() {
        let d = x[i] - q.mean[i];
        acc = acc - half * (ln_2pi + q.log_var[i] + d * d * (-q.log_var[i]).exp());
    }
    Ok(acc)
}

/// `log sum_k w_k N(x; mu_k, var_k)`, via log-sum-exp.
pub fn mixture_logpdf<T: Scalar>(
    dists: &[DiagGaussian<T>],
    weights: &[f64],
    x: &[T],
) -> Result<T, GaussError> {
    if dists.is_empty() {
        return Err(GaussError::Empty);
    }
    if weights.len() != dists.len() {
        return Err(GaussError::Weights("weight count differs from component count".into()));
    }
    check_weights(weights)?;
    let mut terms = Vec::with_capacity(dists.len());
    for (q, &w) in dists.iter().zip(weights) {
        if w > 0.0 {
            terms.push(T::lit(w.ln()) + gaussian_logpdf(q, x)?);
        }
    }
    Ok(logsumexp(&terms))
}

/// Per-dimension sample moments of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Moments {
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self, GaussError> {
        if samples.len() < 2 {
            return Err(GaussError::TooFewSamples(samples.len()));
        }
        let d = samples[0].len();
        let n = samples.len() as f64;
        let mut mean = vec![0.0; d];
        for s in samples {
            if s.len() != d {
                return Err(GaussError::Dimension(d, s.len()));
            }
            for (m, x) in mean.iter_mut().zip(s) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; d];
        for s in samples {
            for i in 0..d {
                var[i] += (s[i] - mean[i]).powi(2) / (n - 1.0);
            }
        }
        Ok(Self {
            mean,
            std: var.into_iter().map(f64::sqrt).collect(),
        })
    }
}

/// Diagonal Fréchet distance `|mu_a - mu_b|^2 + sum (sigma_a - sigma_b)^2`.
pub fn frechet_gaussian_distance(a: &Moments, b: &Moments) -> Result<f64, GaussError> {
    if a.mean.len() != b.mean.len() {
        return Err(GaussError::Dimension(a.mean.len(), b.mean.len()));
    }
    let dm: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let ds: f64 = a.std.iter().zip(&b.std).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(dm + ds)
}

/// Tensor of independent standard-normal draws.
pub fn normal_tensor<T: Scalar, R: rand::Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor<T> {
    let data = (0..rows * cols)
        .map(|_| T::lit(rng.sample::<f64, _>(rand_distr::StandardNormal)))
        .collect();
    Tensor::matrix(rows, cols, data).expect("rows * cols elements")
}

/// A detached batch of diagonal Gaussians, one per row of `[n, d]` tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBatch<T> {
    pub mean: Tensor<T>,
    pub log_var: Tensor<T>,
}

impl<T: Scalar> GaussianBatch<T> {
    pub fn len(&self) -> usize {
        self.mean.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.mean.cols()
    }

    pub fn row(&self, i: usize) -> DiagGaussian<T> {
        DiagGaussian {
            mean: self.mean.row_slice(i).to_vec(),
            log_var: self.log_var.row_slice(i).to_vec(),
        }
    }

    pub fn on<'t>(&self, tape: &'t Tape<T>) -> GaussVar<'t, T> {
        GaussVar {
            mean: tape.leaf(self.mean.clone()),
            log_var: tape.leaf(self.log_var.clone()),
        }
    }
}

/// A batch of diagonal Gaussians on a tape: `mean` and `log_var` are `[n, d]`.
#[derive(Debug)]
pub struct GaussVar<'t, T: Scalar> {
    pub mean: Var<'t, T>,
    pub log_var: Var<'t, T>,
}

impl<T: Scalar> Clone for GaussVar<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for GaussVar<'_, T> {}

impl<'t, T: Scalar> GaussVar<'t, T> {
    /// `n` copies of `N(0, I_d)` as constants.
    pub fn standard(tape: &'t Tape<T>, n: usize, d: usize) -> Self {
        Self {
            mean: tape.leaf(Tensor::zeros(vec![n, d])),
            log_var: tape.leaf(Tensor::zeros(vec![n, d])),
        }
    }

    pub fn from_gaussians(tape: &'t Tape<T>, rows: &[DiagGaussian<T>]) -> Self {
        let d = rows.first().map_or(0, |g| g.dim());
        let mean = rows.iter().flat_map(|g| g.mean.iter().copied()).collect();
        let lv = rows.iter().flat_map(|g| g.log_var.iter().copied()).collect();
        Self {
            mean: tape.leaf(Tensor::matrix(rows.len(), d, mean).expect("row dims")),
            log_var: tape.leaf(Tensor::matrix(rows.len(), d, lv).expect("row dims")),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.cols()
    }

    /// Detached copy of row `i`.
    pub fn row(&self, i: usize) -> DiagGaussian<T> {
        DiagGaussian {
            mean: self.mean.value().row_slice(i).to_vec(),
            log_var: self.log_var.value().row_slice(i).to_vec(),
        }
    }

    pub fn rows(&self) -> Vec<DiagGaussian<T>> {
        (0..self.mean.rows()).map(|i| self.row(i)).collect()
    }

    pub fn detach(&self) -> GaussianBatch<T> {
        GaussianBatch {
            mean: self.mean.to_tensor(),
            log_var: self.log_var.to_tensor(),
        }
    }

    /// Reparameterized sample for constant standard-normal `noise` of shape `[n, d]`.
    pub fn sample(&self, noise: Var<'t, T>) -> Var<'t, T> {
        self.mean + self.log_var.scale(T::lit(0.5)).exp() * noise
    }

    /// Per-row `KL(self || p)`, `[n, 1]`.
    pub fn kl_rows(&self, p: &GaussVar<'t, T>) -> Var<'t, T> {
        let diff = self.mean - p.mean;
        let ratio = (self.log_var - p.log_var).exp();
        let maha = diff.square() * (-p.log_var).exp();
        (p.log_var - self.log_var + ratio + maha).shift(-T::one()).sum_rows().scale(T::lit(0.5))
    }

    /// Per-row `KL(self || N(0, I))`, `[n, 1]`.
    pub fn kl_standard_rows(&self) -> Var<'t, T> {
        (self.log_var.exp() + self.mean.square() - self.log_var)
            .shift(-T::one())
            .sum_rows()
            .scale(T::lit(0.5))
    }

    /// Per-row log-density at `x`, `[n, 1]`.
    pub fn logpdf_rows(&self, x: Var<'t, T>) -> Var<'t, T> {
        let d = self.dim() as f64;
        let quad = (x - self.mean).square() * (-self.log_var).exp();
        (self.log_var + quad)
            .sum_rows()
            .scale(T::lit(-0.5))
            .shift(T::lit(-0.5 * d * (2.0 * std::f64::consts::PI).ln()))
    }

    /// Weighted geometric mean of `parts`, plus a `N(0, I)` expert of weight
    /// `prior_weight`. Weights must sum to one together; zero-weight parts are skipped.
    pub fn poe(parts: &[(GaussVar<'t, T>, f64)], prior_weight: f64) -> Self {
        let live: Vec<_> = parts.iter().filter(|(_, w)| *w > 0.0).collect();
        assert!(!live.is_empty() || prior_weight > 0.0, "poe needs a positive weight");
        let mut precision: Option<Var<'t, T>> = None;
        let mut num: Option<Var<'t, T>> = None;
        for (g, w) in live {
            let p = (-g.log_var).exp().scale(T::lit(*w));
            let m = p * g.mean;
            precision = Some(precision.map_or(p, |acc| acc + p));
            num = Some(num.map_or(m, |acc| acc + m));
        }
        let (precision, num) = match (precision, num) {
            (Some(p), Some(m)) => (p.shift(T::lit(prior_weight)), m),
            _ => {
                // only the standard-normal expert carries weight
                let g = parts[0].0;
                let zero = g.mean.scale(T::zero());
                (zero.shift(T::lit(prior_weight)), zero)
            }
        };
        let log_var = -precision.ln();
        Self {
            mean: num * log_var.exp(),
            log_var,
        }
    }
}

/// Per-row log-density of a weighted mixture at `x`, `[n, 1]`.
pub fn mixture_logpdf_rows<'t, T: Scalar>(
    components: &[(GaussVar<'t, T>, f64)],
    x: Var<'t, T>,
) -> Var<'t, T> {
    let cols: Vec<Var<'t, T>> = components
        .iter()
        .filter(|(_, w)| *w > 0.0)
        .map(|(g, w)| g.logpdf_rows(x).shift(T::lit(w.ln())))
        .collect();
    Var::concat(&cols).logsumexp_rows()
}

#[cfg(test)]
mod tests;
