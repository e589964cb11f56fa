//! Training objectives as differentiable losses with per-term breakdowns.
//!
//! Every objective returns the negated bound averaged over the batch, so
//! minimizing `total` maximizes the bound.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::diffengine::{DiffError, Tensor, Var};
use crate::divergences::pick;
use crate::gaussians::{
    mixture_logpdf_rows, normal_tensor, renormalize, DistributionWeights, GaussError, GaussVar,
};
use crate::model::{fuse_poe, Bound, Fusion, ModalityBatch, ModelError, Posterior};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Gauss(#[from] GaussError),
    #[error("objective needs every modality, modality {0} is masked out")]
    MissingModality(usize),
    #[error("model has style dimensions; use the factorized objective")]
    StyleDims,
    #[error("weights: {0}")]
    Weights(String),
    #[error("non-finite {term}: {value}")]
    NonFinite { term: String, value: f64 },
}

/// Which abstract mean forms the dynamic prior of the JS term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorKind {
    /// Mixture of the posteriors and `N(0, I)`; the JS term is estimated by Monte Carlo.
    Arithmetic,
    /// Normalized weighted geometric mean; the JS term is closed form.
    Geometric,
}

impl FromStr for PriorKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "arithmetic" => Ok(Self::Arithmetic),
            "geometric" => Ok(Self::Geometric),
            _ => Err(format!("unknown prior kind {s:?} (arithmetic|geometric)")),
        }
    }
}

impl fmt::Display for PriorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Arithmetic => "arithmetic",
            Self::Geometric => "geometric",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    ElboJoint,
    MoeBound,
    Mmjsd,
    MmjsdFactorized,
}

impl FromStr for ObjectiveKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "elbo_joint" => Ok(Self::ElboJoint),
            "moe_bound" => Ok(Self::MoeBound),
            "mmjsd" => Ok(Self::Mmjsd),
            "mmjsd_factorized" => Ok(Self::MmjsdFactorized),
            _ => Err(format!(
                "unknown objective {s:?} (elbo_joint|moe_bound|mmjsd|mmjsd_factorized)"
            )),
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ElboJoint => "elbo_joint",
            Self::MoeBound => "moe_bound",
            Self::Mmjsd => "mmjsd",
            Self::MmjsdFactorized => "mmjsd_factorized",
        })
    }
}

/// Term weights of the objectives.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightConfig {
    /// `M + 1` weights, the prior last.
    pub pi: DistributionWeights,
    pub beta: f64,
    pub beta_style: f64,
    pub likelihood_scales: Vec<f64>,
    /// Extra per-modality factor on style divergences.
    pub beta_per_modality: Vec<f64>,
}

impl WeightConfig {
    /// Uniform `pi`, every other weight 1.
    pub fn unit(modalities: usize) -> Self {
        Self {
            pi: DistributionWeights::uniform(modalities + 1).expect("at least two weights"),
            beta: 1.0,
            beta_style: 1.0,
            likelihood_scales: vec![1.0; modalities],
            beta_per_modality: vec![1.0; modalities],
        }
    }

    /// Uniform `pi`, `beta = 5`, `beta_style = M`, size-ratio likelihood scales.
    pub fn recipe(element_counts: &[usize], beta_per_modality: Vec<f64>) -> Result<Self, ObjectiveError> {
        let m = element_counts.len();
        let w = Self {
            pi: DistributionWeights::uniform(m + 1)?,
            beta: 5.0,
            beta_style: m as f64,
            likelihood_scales: likelihood_scales(element_counts)?,
            beta_per_modality,
        };
        w.validate(m)?;
        Ok(w)
    }

    pub fn modalities(&self) -> usize {
        self.likelihood_scales.len()
    }

    pub fn validate(&self, modalities: usize) -> Result<(), ObjectiveError> {
        let bad = |msg: String| Err(ObjectiveError::Weights(msg));
        if self.pi.len() != modalities + 1 {
            return bad(format!("pi has {} entries, need {}", self.pi.len(), modalities + 1));
        }
        if self.likelihood_scales.len() != modalities || self.beta_per_modality.len() != modalities {
            return bad(format!("per-modality weights must have {modalities} entries"));
        }
        let scalars = [self.beta, self.beta_style]
            .into_iter()
            .chain(self.likelihood_scales.iter().copied())
            .chain(self.beta_per_modality.iter().copied());
        for v in scalars {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{v} is not a finite non-negative weight"));
            }
        }
        Ok(())
    }
}

/// `max_count / count_j` for each modality: the largest modality gets weight 1.
pub fn likelihood_scales(element_counts: &[usize]) -> Result<Vec<f64>, ObjectiveError> {
    if element_counts.contains(&0) {
        return Err(ObjectiveError::Weights("modality with zero elements".into()));
    }
    let max = element_counts.iter().copied().max().unwrap_or(1) as f64;
    Ok(element_counts.iter().map(|&c| max / c as f64).collect())
}

/// Batch-mean values of an objective's terms.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveBreakdown {
    /// `scale_j * E[log p(x_j | z)]` per modality.
    pub reconstruction: Vec<f64>,
    /// Unweighted divergence on the shared space.
    pub shared_divergence: f64,
    /// Unweighted `KL(q(s_j | x_j) || N(0, I))` per modality.
    pub style_divergence: Vec<f64>,
    /// The loss.
    pub total: f64,
}

impl ObjectiveBreakdown {
    /// Rebuilds the loss from the terms.
    pub fn recombine(&self, w: &WeightConfig) -> f64 {
        let recon: f64 = self.reconstruction.iter().sum();
        let style: f64 = self
            .style_divergence
            .iter()
            .zip(&w.beta_per_modality)
            .map(|(d, b)| d * b)
            .sum();
        -(recon - w.beta * self.shared_divergence - w.beta_style * style)
    }

    /// First non-finite term, if any.
    pub fn non_finite(&self) -> Option<(String, f64)> {
        let named = self
            .reconstruction
            .iter()
            .enumerate()
            .map(|(j, v)| (format!("reconstruction[{j}]"), *v))
            .chain(std::iter::once(("shared_divergence".to_string(), self.shared_divergence)))
            .chain(
                self.style_divergence
                    .iter()
                    .enumerate()
                    .map(|(j, v)| (format!("style_divergence[{j}]"), *v)),
            )
            .chain(std::iter::once(("total".to_string(), self.total)));
        named.into_iter().find(|(_, v)| !v.is_finite())
    }
}

/// A loss on the tape with its breakdown.
pub struct Loss<'t, T: Scalar> {
    pub total: Var<'t, T>,
    pub breakdown: ObjectiveBreakdown,
}

/// Knobs that are not weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveOptions {
    /// Fusion for the joint and subset ELBOs.
    pub fusion: Fusion,
    /// Monte-Carlo draws per batch row and component for the arithmetic JS term.
    pub js_samples: usize,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        Self {
            fusion: Fusion::Poe { prior_expert: false },
            js_samples: 16,
        }
    }
}

struct Terms<'t, T: Scalar> {
    recon: Vec<Var<'t, T>>,
    shared: Var<'t, T>,
    style: Vec<Option<Var<'t, T>>>,
}

impl<'t, T: Scalar> Terms<'t, T> {
    fn finish(self, w: &WeightConfig) -> Loss<'t, T> {
        let mut total: Option<Var<'t, T>> = None;
        let mut add = |v: Var<'t, T>| total = Some(total.map_or(v, |t| t + v));
        let mut reconstruction = Vec::new();
        for (j, r) in self.recon.iter().enumerate() {
            let scaled = r.mean().scale(T::lit(-w.likelihood_scales[j]));
            reconstruction.push(-scaled.item().to_f64_lossy());
            add(scaled);
        }
        let shared = self.shared.mean();
        add(shared.scale(T::lit(w.beta)));
        let mut style_divergence = Vec::new();
        for (j, s) in self.style.iter().enumerate() {
            match s {
                Some(kl) => {
                    let kl = kl.mean();
                    style_divergence.push(kl.item().to_f64_lossy());
                    add(kl.scale(T::lit(w.beta_style * w.beta_per_modality[j])));
                }
                None => style_divergence.push(0.0),
            }
        }
        let total = total.expect("at least one term");
        Loss {
            breakdown: ObjectiveBreakdown {
                reconstruction,
                shared_divergence: shared.item().to_f64_lossy(),
                style_divergence,
                total: total.item().to_f64_lossy(),
            },
            total,
        }
    }
}

fn prepare<'t, T: Scalar>(
    bound: &Bound<'_, 't, T>,
    batch: &ModalityBatch<T>,
    w: &WeightConfig,
) -> Result<Vec<Var<'t, T>>, ObjectiveError> {
    let model = bound.model();
    model.check_batch(batch)?;
    w.validate(model.modalities())?;
    Ok((0..model.modalities()).map(|j| bound.tape().leaf(batch.data(j).clone())).collect())
}

fn require_complete<T: Scalar>(batch: &ModalityBatch<T>) -> Result<(), ObjectiveError> {
    match batch.mask().iter().position(|&m| !m) {
        Some(j) => Err(ObjectiveError::MissingModality(j)),
        None => Ok(()),
    }
}

/// Style samples and divergences: posterior draws for available modalities,
/// prior draws (and no divergence) for missing ones.
fn styles<'t, T: Scalar, R: Rng + ?Sized>(
    bound: &Bound<'_, 't, T>,
    posts: &[Option<Posterior<'t, T>>],
    n: usize,
    rng: &mut R,
) -> (Vec<Var<'t, T>>, Vec<Option<Var<'t, T>>>) {
    let tape = bound.tape();
    let s_dims = &bound.model().partition().s_dims;
    let mut samples = Vec::new();
    let mut kls = Vec::new();
    for (j, post) in posts.iter().enumerate() {
        let noise = tape.leaf(normal_tensor(rng, n, s_dims[j]));
        match post {
            Some(p) if s_dims[j] > 0 => {
                samples.push(p.style.sample(noise));
                kls.push(Some(p.style.kl_standard_rows()));
            }
            _ => {
                samples.push(noise);
                kls.push(None);
            }
        }
    }
    (samples, kls)
}

fn reconstruct<'t, T: Scalar>(
    bound: &Bound<'_, 't, T>,
    xs: &[Var<'t, T>],
    content: Var<'t, T>,
    style: &[Var<'t, T>],
) -> Vec<Var<'t, T>> {
    (0..xs.len())
        .map(|j| {
            let out = bound.decode(j, content, style[j]);
            bound.log_likelihood_rows(j, out, xs[j])
        })
        .collect()
}

/// Reparameterized draw from a mixture, choosing one component per row.
fn mixture_sample<'t, T: Scalar, R: Rng + ?Sized>(
    parts: &[GaussVar<'t, T>],
    weights: &[f64],
    rng: &mut R,
) -> Var<'t, T> {
    let tape = parts[0].mean.tape();
    let (n, d) = (parts[0].mean.rows(), parts[0].dim());
    let picks: Vec<usize> = (0..n).map(|_| pick(weights, rng.random::<f64>())).collect();
    let noise = tape.leaf(normal_tensor(rng, n, d));
    let mut z: Option<Var<'t, T>> = None;
    for (k, g) in parts.iter().enumerate() {
        if !picks.contains(&k) {
            continue;
        }
        let mut sel = Tensor::zeros(vec![n, d]);
        for (i, _) in picks.iter().enumerate().filter(|(_, &p)| p == k) {
            sel.data_mut()[i * d..(i + 1) * d].fill(T::one());
        }
        let part = g.sample(noise) * tape.leaf(sel);
        z = Some(z.map_or(part, |acc| acc + part));
    }
    z.expect("every row picks a component")
}

/// Negated subset ELBO: content fused over the modalities in `mask`,
/// reconstruction of all modalities.
pub fn elbo_subset<'t, T: Scalar, R: Rng + ?Sized>(
    bound: &Bound<'_, 't, T>,
    batch: &ModalityBatch<T>,
    mask: &[bool],
    fusion: Fusion,
    w: &WeightConfig,
    rng: &mut R,
) -> Result<Loss<'t, T>, ObjectiveError> {
    let xs = prepare(bound, batch, w)?;
    let m = xs.len();
    if mask.len() != m {
        return Err(ModelError::Batch("mask length differs from modality count".into()).into());
    }
    if !mask.iter().any(|&a| a) {
        return Err(ModelError::EmptyMask.into());
    }
    let tape = bound.tape();
    let n = batch.len();
    let posts: Vec<_> = (0..m).map(|j| mask[j].then(|| bound.encode(j, xs[j]))).collect();
    let parts: Vec<_> = posts.iter().flatten().map(|p| p.content).collect();
    let (content, shared) = match fusion {
        Fusion::Poe { prior_expert } => {
            let q = fuse_poe(&parts, prior_expert);
            let noise = tape.leaf(normal_tensor(rng, n, q.dim()));
            (q.sample(noise), q.kl_standard_rows())
        }
        Fusion::Moe => {
            let avail: Vec<f64> = (0..m).filter(|&j| mask[j]).map(|j| w.pi.as_slice()[j]).collect();
            let weights = renormalize(&avail);
            let z = mixture_sample(&parts, &weights, rng);
            (z, jensen_rows(&parts, &weights))
        }
    };
    let (style, style_kl) = styles(bound, &posts, n, rng);
    let recon = reconstruct(bound, &xs, content, &style);
    Ok(Terms {
        recon,
        shared,
        style: style_kl,
    }
    .finish(w))
}

/// Negated joint ELBO; the batch must be complete.
pub fn elbo_joint<'t, T: Scalar, R: Rng + ?Sized>(
    bound: &Bound<'_, 't, T>,
    batch: &ModalityBatch<T>,
    fusion: Fusion,
    w: &WeightConfig,
    rng: &mut R,
) -> Result<Loss<'t, T>, ObjectiveError> {
    require_complete(batch)?;
    elbo_subset(bound, batch, batch.mask(), fusion, w, rng)
}

/// `sum_k w_k KL(q_k || N(0, I))` per row.
fn jensen_rows<'t, T: Scalar>(parts: &[GaussVar<'t, T>], weights: &[f64]) -> Var<'t, T> {
    let mut acc: Option<Var<'t, T>> = None;
    for (g, &wk) in parts.iter().zip(weights) {
        if wk > 0.0 {
            let t = g.kl_standard_rows().scale(T::lit(wk));
            acc = Some(acc.map_or(t, |a| a + t));
        }
    }
    acc.expect("a positive weight")
}

/// Negated Jensen lower bound of the mixture-posterior ELBO.
pub fn moe_bound<'t, T: Scalar, R: Rng + ?Sized>(
    bound: &Bound<'_, 't, T>,
    batch: &ModalityBatch<T>,
    w: &WeightConfig,
    rng: &mut R,
) -> Result<Loss<'t, T>, ObjectiveError> {
    require_complete(batch)?;
    let xs = prepare(bound, batch, w)?;
    let n = batch.len();
    let posts: Vec<_> = (0..xs.len()).map(|j| Some(bound.encode(j, xs[j]))).collect();
    let parts: Vec<_> = posts.iter().flatten().map(|p| p.content).collect();
    let weights = w.pi.prefix_renormalized();
    let content = mixture_sample(&parts, &weights, rng);
    let (style, style_kl) = styles(bound, &posts, n, rng);
    let recon = reconstruct(bound, &xs, content, &style);
    Ok(Terms {
        recon,
        shared: jensen_rows(&parts, &weights),
        style: style_kl,
    }
    .finish(w))
}

/// Per-row JS divergence of the posteriors and `N(0, I)` with weights `pi`.
pub fn js_rows<'t, T: Scalar, R: Rng + ?Sized>(
    parts: &[GaussVar<'t, T>],
    pi: &DistributionWeights,
    prior: PriorKind,
    samples: usize,
    rng: &mut R,
) -> Var<'t, T> {
    let tape = parts[0].mean.tape();
    let (n, d) = (parts[0].mean.rows(), parts[0].dim());
    let mut all = parts.to_vec();
    all.push(GaussVar::standard(tape, n, d));
    let weighted: Vec<_> = all.iter().copied().zip(pi.as_slice().iter().copied()).collect();
    let mut acc: Option<Var<'t, T>> = None;
    match prior {
        PriorKind::Geometric => {
            let (experts, prior_w) = weighted.split_at(parts.len());
            let center = GaussVar::poe(experts, prior_w[0].1);
            for (g, wk) in &weighted {
                if *wk > 0.0 {
                    let t = g.kl_rows(&center).scale(T::lit(*wk));
                    acc = Some(acc.map_or(t, |a| a + t));
                }
            }
        }
        PriorKind::Arithmetic => {
            for (g, wk) in &weighted {
                if *wk <= 0.0 {
                    continue;
                }
                for _ in 0..samples {
                    let x = g.sample(tape.leaf(normal_tensor(rng, n, d)));
                    let t = (g.logpdf_rows(x) - mixture_logpdf_rows(&weighted, x)).scale(T::lit(*wk / samples as f64));
                    acc = Some(acc.map_or(t, |a| a + t));
                }
            }
        }
    }
    acc.expect("a positive weight")
}

fn js_objective<'t, T: Scalar, R: Rng + ?Sized>(
    bound: &Bound<'_, 't, T>,
    batch: &ModalityBatch<T>,
    prior: PriorKind,
    w: &WeightConfig,
    opts: &ObjectiveOptions,
    rng: &mut R,
) -> Result<Loss<'t, T>, ObjectiveError> {
    require_complete(batch)?;
    let xs = prepare(bound, batch, w)?;
    let n = batch.len();
    let posts: Vec<_> = (0..xs.len()).map(|j| Some(bound.encode(j, xs[j]))).collect();
    let parts: Vec<_> = posts.iter().flatten().map(|p| p.content).collect();
    let content = mixture_sample(&parts, &w.pi.prefix_renormalized(), rng);
    let (style, style_kl) = styles(bound, &posts, n, rng);
    let recon = reconstruct(bound, &xs, content, &style);
    let shared = js_rows(&parts, &w.pi, prior, opts.js_samples.max(1), rng);
    Ok(Terms {
        recon,
        shared,
        style: style_kl,
    }
    .finish(w))
}

/// Negated mmJSD objective: reconstruction under the mixture posterior minus
/// `beta` times the JS divergence of the posteriors and the prior.
pub fn mmjsd<'t, T: Scalar, R: Rng + ?Sized>(
    bound: &Bound<'_, 't, T>,
    batch: &ModalityBatch<T>,
    prior: PriorKind,
    w: &WeightConfig,
    opts: &ObjectiveOptions,
    rng: &mut R,
) -> Result<Loss<'t, T>, ObjectiveError> {
    if bound.model().partition().has_style() {
        return Err(ObjectiveError::StyleDims);
    }
    js_objective(bound, batch, prior, w, opts, rng)
}

/// mmJSD with modality-specific style spaces: the JS term acts on the shared
/// content, each style gets its own weighted KL to `N(0, I)`.
pub fn mmjsd_factorized<'t, T: Scalar, R: Rng + ?Sized>(
    bound: &Bound<'_, 't, T>,
    batch: &ModalityBatch<T>,
    prior: PriorKind,
    w: &WeightConfig,
    opts: &ObjectiveOptions,
    rng: &mut R,
) -> Result<Loss<'t, T>, ObjectiveError> {
    js_objective(bound, batch, prior, w, opts, rng)
}

/// Dispatches on `kind`.
pub fn objective<'t, T: Scalar, R: Rng + ?Sized>(
    kind: ObjectiveKind,
    bound: &Bound<'_, 't, T>,
    batch: &ModalityBatch<T>,
    prior: PriorKind,
    w: &WeightConfig,
    opts: &ObjectiveOptions,
    rng: &mut R,
) -> Result<Loss<'t, T>, ObjectiveError> {
    match kind {
        ObjectiveKind::ElboJoint => elbo_joint(bound, batch, opts.fusion, w, rng),
        ObjectiveKind::MoeBound => moe_bound(bound, batch, w, rng),
        ObjectiveKind::Mmjsd => mmjsd(bound, batch, prior, w, opts, rng),
        ObjectiveKind::MmjsdFactorized => mmjsd_factorized(bound, batch, prior, w, opts, rng),
    }
}
