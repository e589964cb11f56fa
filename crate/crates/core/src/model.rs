//! Per-modality MLP encoders and decoders over a latent space split into a
//! shared content part `c` and modality-private style parts `s_j`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffengine::{DiffError, Tape, Tensor, Var};
use crate::gaussians::{normal_tensor, GaussVar, GaussianBatch, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid modality spec: {0}")]
    Spec(String),
    #[error("invalid latent partition: {0}")]
    Partition(String),
    #[error("modality {modality}: expected {expected} columns, got {got}")]
    Shape {
        modality: usize,
        expected: usize,
        got: usize,
    },
    #[error("availability mask selects no modality")]
    EmptyMask,
    #[error("batch: {0}")]
    Batch(String),
    #[error("parameter mismatch: {0}")]
    Params(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Observation model of one modality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Likelihood {
    Gaussian { scale: f64 },
    Laplace { scale: f64 },
    /// One-hot sequence of `element_count / alphabet` positions.
    Categorical { alphabet: usize },
}

impl fmt::Display for Likelihood {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Gaussian { scale } => write!(f, "gaussian:{scale}"),
            Self::Laplace { scale } => write!(f, "laplace:{scale}"),
            Self::Categorical { alphabet } => write!(f, "categorical:{alphabet}"),
        }
    }
}

impl FromStr for Likelihood {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (kind, arg) = s.split_once(':').ok_or_else(|| format!("likelihood {s:?} lacks ':<parameter>'"))?;
        let bad = |e: &dyn fmt::Display| format!("likelihood {s:?}: {e}");
        match kind {
            "gaussian" => Ok(Self::Gaussian {
                scale: arg.parse().map_err(|e| bad(&e))?,
            }),
            "laplace" => Ok(Self::Laplace {
                scale: arg.parse().map_err(|e| bad(&e))?,
            }),
            "categorical" => Ok(Self::Categorical {
                alphabet: arg.parse().map_err(|e| bad(&e))?,
            }),
            _ => Err(format!("unknown likelihood kind {kind:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySpec {
    pub name: String,
    pub element_count: usize,
    pub likelihood: Likelihood,
    /// Hidden widths shared by this modality's encoder and decoder.
    pub hidden: Vec<usize>,
}

impl ModalitySpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.element_count == 0 {
            return Err(ModelError::Spec(format!("{}: element_count must be >= 1", self.name)));
        }
        match self.likelihood {
            Likelihood::Categorical { alphabet } => {
                if alphabet < 2 {
                    return Err(ModelError::Spec(format!("{}: alphabet must be >= 2", self.name)));
                }
                if !self.element_count.is_multiple_of(alphabet) {
                    return Err(ModelError::Spec(format!(
                        "{}: {} elements is not a whole number of {}-symbol positions",
                        self.name, self.element_count, alphabet
                    )));
                }
            }
            Likelihood::Gaussian { scale } | Likelihood::Laplace { scale } => {
                if !(scale.is_finite() && scale > 0.0) {
                    return Err(ModelError::Spec(format!("{}: scale must be positive", self.name)));
                }
            }
        }
        if self.hidden.contains(&0) {
            return Err(ModelError::Spec(format!("{}: zero-width hidden layer", self.name)));
        }
        Ok(())
    }
}

/// Dimension split `z = (c, s_1..s_M)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPartition {
    pub c_dim: usize,
    pub s_dims: Vec<usize>,
}

impl LatentPartition {
    pub fn new(c_dim: usize, s_dims: Vec<usize>) -> Self {
        Self { c_dim, s_dims }
    }

    pub fn uniform(c_dim: usize, s_dim: usize, modalities: usize) -> Self {
        Self::new(c_dim, vec![s_dim; modalities])
    }

    pub fn has_style(&self) -> bool {
        self.s_dims.iter().any(|&s| s > 0)
    }

    /// Decoder input width of modality `j`.
    pub fn latent_dim(&self, j: usize) -> usize {
        self.c_dim + self.s_dims[j]
    }
}

/// Mini-batch of the modality set with an availability mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBatch<T> {
    data: Vec<Tensor<T>>,
    mask: Vec<bool>,
    labels: Vec<u32>,
}

impl<T: Scalar> ModalityBatch<T> {
    /// `data[j]` is `[n, element_count_j]`; `labels` is empty or has `n` entries.
    pub fn new(data: Vec<Tensor<T>>, mask: Vec<bool>, labels: Vec<u32>) -> Result<Self, ModelError> {
        if data.len() != mask.len() {
            return Err(ModelError::Batch(format!("{} tensors but {} mask entries", data.len(), mask.len())));
        }
        if !mask.iter().any(|&m| m) {
            return Err(ModelError::EmptyMask);
        }
        let n = data.first().map_or(0, |t| t.rows());
        if data.iter().any(|t| !t.is_matrix() || t.rows() != n) {
            return Err(ModelError::Batch("modalities disagree on batch size".into()));
        }
        if !labels.is_empty() && labels.len() != n {
            return Err(ModelError::Batch(format!("{} labels for {n} rows", labels.len())));
        }
        Ok(Self { data, mask, labels })
    }

    /// Every modality available.
    pub fn complete(data: Vec<Tensor<T>>, labels: Vec<u32>) -> Result<Self, ModelError> {
        let mask = vec![true; data.len()];
        Self::new(data, mask, labels)
    }

    pub fn len(&self) -> usize {
        self.data[0].rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn modalities(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self, j: usize) -> &Tensor<T> {
        &self.data[j]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    pub fn with_mask(&self, mask: Vec<bool>) -> Result<Self, ModelError> {
        Self::new(self.data.clone(), mask, self.labels.clone())
    }

    /// The given rows, in order.
    pub fn select(&self, rows: &[usize]) -> Result<Self, ModelError> {
        if let Some(&bad) = rows.iter().find(|&&i| i >= self.len()) {
            return Err(ModelError::Batch(format!("row {bad} out of range for {} rows", self.len())));
        }
        let labels = if self.labels.is_empty() {
            Vec::new()
        } else {
            rows.iter().map(|&i| self.labels[i]).collect()
        };
        Self::new(
            self.data.iter().map(|t| t.select_rows(rows)).collect(),
            self.mask.clone(),
            labels,
        )
    }
}

/// How unimodal posteriors over `c` are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    /// Normalized geometric mean with uniform weights, optionally with `N(0, I)`
    /// as an extra expert.
    Poe { prior_expert: bool },
    /// Uniform mixture of the available posteriors.
    Moe,
}

/// Fused posterior over the shared content.
#[derive(Debug, Clone, PartialEq)]
pub enum JointPosterior<T> {
    Gaussian(GaussianBatch<T>),
    /// Equally weighted components, one per available modality.
    Mixture(Vec<GaussianBatch<T>>),
}

impl<T: Scalar> JointPosterior<T> {
    /// One draw per row; mixtures pick a component per row.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor<T> {
        match self {
            Self::Gaussian(g) => sample_batch(g, rng),
            Self::Mixture(parts) => {
                let (n, d) = (parts[0].len(), parts[0].dim());
                let mut out = Tensor::zeros(vec![n, d]);
                for i in 0..n {
                    let k = rng.random_range(0..parts.len());
                    let g = &parts[k];
                    for c in 0..d {
                        let e = T::lit(rng.sample::<f64, _>(rand_distr::StandardNormal));
                        let std = (g.log_var.get(i, c) * T::lit(0.5)).exp();
                        out.data_mut()[i * d + c] = g.mean.get(i, c) + std * e;
                    }
                }
                out
            }
        }
    }

    /// Posterior mean per row.
    pub fn mean(&self) -> Tensor<T> {
        match self {
            Self::Gaussian(g) => g.mean.clone(),
            Self::Mixture(parts) => {
                let k = T::lit(parts.len() as f64);
                let mut acc = parts[0].mean.clone();
                for p in &parts[1..] {
                    acc = acc.zip_map(&p.mean, |a, b| a + b);
                }
                acc.map(|v| v / k)
            }
        }
    }
}

fn sample_batch<T: Scalar, R: Rng + ?Sized>(g: &GaussianBatch<T>, rng: &mut R) -> Tensor<T> {
    let noise: Tensor<T> = normal_tensor(rng, g.len(), g.dim());
    let std = g.log_var.map(|lv| (lv * T::lit(0.5)).exp());
    let scaled = std.zip_map(&noise, |s, e| s * e);
    g.mean.zip_map(&scaled, |m, v| m + v)
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    w: usize,
    b: usize,
}

/// Multimodal VAE: one encoder `phi_j` and decoder `theta_j` per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalVAE<T> {
    specs: Vec<ModalitySpec>,
    partition: LatentPartition,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    encoders: Vec<Vec<Layer>>,
    decoders: Vec<Vec<Layer>>,
}

type Layout = (Vec<(String, Vec<usize>)>, Vec<Vec<Layer>>, Vec<Vec<Layer>>);

fn layout(specs: &[ModalitySpec], partition: &LatentPartition) -> Result<Layout, ModelError> {
    if specs.is_empty() {
        return Err(ModelError::Spec("at least one modality is required".into()));
    }
    for s in specs {
        s.validate()?;
    }
    if partition.s_dims.len() != specs.len() {
        return Err(ModelError::Partition(format!(
            "{} style widths for {} modalities",
            partition.s_dims.len(),
            specs.len()
        )));
    }
    if partition.c_dim == 0 {
        return Err(ModelError::Partition("shared content needs c_dim >= 1".into()));
    }
    let mut shapes = Vec::new();
    let mut net = |prefix: String, widths: Vec<usize>| -> Vec<Layer> {
        widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                shapes.push((format!("{prefix}.{l}.w"), vec![w[0], w[1]]));
                shapes.push((format!("{prefix}.{l}.b"), vec![1, w[1]]));
                Layer {
                    w: shapes.len() - 2,
                    b: shapes.len() - 1,
                }
            })
            .collect()
    };
    let mut encoders = Vec::new();
    let mut decoders = Vec::new();
    for (j, s) in specs.iter().enumerate() {
        let z = partition.latent_dim(j);
        let mut enc = vec![s.element_count];
        enc.extend(&s.hidden);
        enc.push(2 * z);
        encoders.push(net(format!("enc{j}"), enc));
        let mut dec = vec![z];
        dec.extend(&s.hidden);
        dec.push(s.element_count);
        decoders.push(net(format!("dec{j}"), dec));
    }
    Ok((shapes, encoders, decoders))
}

impl<T: Scalar> MultimodalVAE<T> {
    /// Fresh model, every weight and bias uniform in `±1/sqrt(fan_in)`.
    pub fn new(specs: Vec<ModalitySpec>, partition: LatentPartition, seed: u64) -> Result<Self, ModelError> {
        let (shapes, encoders, decoders) = layout(&specs, &partition)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(shapes.len());
        let mut params = Vec::with_capacity(shapes.len());
        // a layer's bias follows its weight, so the weight's fan-in applies to both
        let mut fan_in = 1;
        for (name, shape) in shapes {
            if name.ends_with(".w") {
                fan_in = shape[0];
            }
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
            params.push(Tensor::new(shape, data)?);
            names.push(name);
        }
        Ok(Self {
            specs,
            partition,
            names,
            params,
            encoders,
            decoders,
        })
    }

    /// Rebuilds a model from named parameters, checking names and shapes.
    pub fn from_params(
        specs: Vec<ModalitySpec>,
        partition: LatentPartition,
        named: Vec<(String, Tensor<T>)>,
    ) -> Result<Self, ModelError> {
        let (shapes, encoders, decoders) = layout(&specs, &partition)?;
        if shapes.len() != named.len() {
            return Err(ModelError::Params(format!("expected {} tensors, got {}", shapes.len(), named.len())));
        }
        let mut names = Vec::new();
        let mut params = Vec::new();
        for ((want_name, want_shape), (name, t)) in shapes.into_iter().zip(named) {
            if want_name != name || want_shape != t.shape() {
                return Err(ModelError::Params(format!(
                    "expected {want_name} {want_shape:?}, got {name} {:?}",
                    t.shape()
                )));
            }
            names.push(name);
            params.push(t);
        }
        Ok(Self {
            specs,
            partition,
            names,
            params,
            encoders,
            decoders,
        })
    }

    /// One Gaussian modality with `x = z + eps`, `eps ~ N(0, noise_std^2 I)`,
    /// `z ~ N(0, I)`, and an encoder that outputs the exact posterior
    /// `N(x / (1 + s^2), s^2 / (1 + s^2))`.
    pub fn linear_gaussian_toy(dim: usize, noise_std: f64) -> Result<Self, ModelError> {
        let spec = ModalitySpec {
            name: "x".into(),
            element_count: dim,
            likelihood: Likelihood::Gaussian { scale: noise_std },
            hidden: vec![],
        };
        let mut m = Self::new(vec![spec], LatentPartition::new(dim, vec![0]), 0)?;
        let v = noise_std * noise_std;
        let gain = T::lit(1.0 / (1.0 + v));
        let log_var = T::lit((v / (1.0 + v)).ln());
        let p = &mut m.params;
        p[0] = Tensor::zeros(vec![dim, 2 * dim]);
        p[1] = Tensor::zeros(vec![1, 2 * dim]);
        for i in 0..dim {
            p[0].data_mut()[i * 2 * dim + i] = gain;
            p[1].data_mut()[dim + i] = log_var;
        }
        p[2] = Tensor::eye(dim);
        p[3] = Tensor::zeros(vec![1, dim]);
        Ok(m)
    }

    pub fn specs(&self) -> &[ModalitySpec] {
        &self.specs
    }

    pub fn partition(&self) -> &LatentPartition {
        &self.partition
    }

    pub fn modalities(&self) -> usize {
        self.specs.len()
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Same architecture with parameters converted to another element type.
    pub fn cast<U: Scalar>(&self) -> MultimodalVAE<U> {
        MultimodalVAE {
            specs: self.specs.clone(),
            partition: self.partition.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            encoders: self.encoders.clone(),
            decoders: self.decoders.clone(),
        }
    }

    /// Places every parameter on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'_, 't, T> {
        let vars = self.params.iter().map(|p| tape.leaf(p.clone())).collect();
        Bound { model: self, tape, vars }
    }

    /// Binds caller-supplied parameter variables, e.g. gradient-check inputs.
    pub fn bind_vars<'t>(&self, tape: &'t Tape<T>, vars: Vec<Var<'t, T>>) -> Result<Bound<'_, 't, T>, ModelError> {
        if vars.len() != self.params.len() {
            return Err(ModelError::Params(format!("expected {} variables, got {}", self.params.len(), vars.len())));
        }
        for ((v, p), name) in vars.iter().zip(&self.params).zip(&self.names) {
            if v.shape() != p.shape().to_vec() {
                return Err(ModelError::Params(format!("{name}: expected {:?}, got {:?}", p.shape(), v.shape())));
            }
        }
        Ok(Bound { model: self, tape, vars })
    }

    pub fn check_batch(&self, batch: &ModalityBatch<T>) -> Result<(), ModelError> {
        if batch.modalities() != self.modalities() {
            return Err(ModelError::Batch(format!(
                "batch has {} modalities, model {}",
                batch.modalities(),
                self.modalities()
            )));
        }
        for (j, s) in self.specs.iter().enumerate() {
            let got = batch.data(j).cols();
            if got != s.element_count {
                return Err(ModelError::Shape {
                    modality: j,
                    expected: s.element_count,
                    got,
                });
            }
        }
        Ok(())
    }

    /// Content and style posteriors of modality `j` for each row of `x`.
    pub fn encode(&self, j: usize, x: &Tensor<T>) -> Result<(GaussianBatch<T>, GaussianBatch<T>), ModelError> {
        let expected = self.specs[j].element_count;
        if !x.is_matrix() || x.cols() != expected {
            return Err(ModelError::Shape {
                modality: j,
                expected,
                got: if x.is_matrix() { x.cols() } else { x.len() },
            });
        }
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let post = bound.encode(j, tape.leaf(x.clone()));
        Ok((post.content.detach(), post.style.detach()))
    }

    /// Fuses the content posteriors of the modalities selected by `mask`.
    pub fn infer_joint(
        &self,
        batch: &ModalityBatch<T>,
        mask: &[bool],
        fusion: Fusion,
    ) -> Result<JointPosterior<T>, ModelError> {
        self.check_batch(batch)?;
        if mask.len() != self.modalities() {
            return Err(ModelError::Batch("mask length differs from modality count".into()));
        }
        if !mask.iter().any(|&m| m) {
            return Err(ModelError::EmptyMask);
        }
        let mut parts = Vec::new();
        for j in (0..self.modalities()).filter(|&j| mask[j]) {
            parts.push(self.encode(j, batch.data(j))?.0);
        }
        Ok(match fusion {
            Fusion::Moe => JointPosterior::Mixture(parts),
            Fusion::Poe { prior_expert } => {
                let tape = Tape::new();
                let vars: Vec<_> = parts.iter().map(|p| p.on(&tape)).collect();
                JointPosterior::Gaussian(fuse_poe(&vars, prior_expert).detach())
            }
        })
    }

    /// Decoder output for `z = c ++ s`: likelihood means, or one-hot argmax
    /// symbols for categorical modalities.
    pub fn decode(&self, j: usize, content: &Tensor<T>, style: &Tensor<T>) -> Tensor<T> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let out = bound.decode(j, tape.leaf(content.clone()), tape.leaf(style.clone()));
        let out = out.to_tensor();
        match self.specs[j].likelihood {
            Likelihood::Categorical { alphabet } => one_hot_argmax(&out, alphabet),
            _ => out,
        }
    }

    /// Generates every modality from content fused over `mask`.
    ///
    /// Available modalities keep a style drawn from their own posterior,
    /// missing ones draw style from `N(0, I)`.
    pub fn conditional_generate<R: Rng + ?Sized>(
        &self,
        batch: &ModalityBatch<T>,
        mask: &[bool],
        fusion: Fusion,
        rng: &mut R,
    ) -> Result<Vec<Tensor<T>>, ModelError> {
        let joint = self.infer_joint(batch, mask, fusion)?;
        let n = batch.len();
        let content = joint.sample(rng);
        let mut out = Vec::with_capacity(self.modalities());
        for j in 0..self.modalities() {
            let s_dim = self.partition.s_dims[j];
            let style = if mask[j] {
                sample_batch(&self.encode(j, batch.data(j))?.1, rng)
            } else {
                normal_tensor(rng, n, s_dim)
            };
            out.push(self.decode(j, &content, &style));
        }
        Ok(out)
    }

    /// Unconditional samples: `c` and every `s_j` from `N(0, I)`, one shared `c` per sample.
    pub fn random_generate<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<Tensor<T>> {
        let content = normal_tensor(rng, count, self.partition.c_dim);
        (0..self.modalities())
            .map(|j| {
                let style = normal_tensor(rng, count, self.partition.s_dims[j]);
                self.decode(j, &content, &style)
            })
            .collect()
    }
}

fn one_hot_argmax<T: Scalar>(logits: &Tensor<T>, alphabet: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(logits.shape().to_vec());
    for (src, dst) in logits.data().chunks(alphabet).zip(out.data_mut().chunks_mut(alphabet)) {
        let mut best = 0;
        for (k, v) in src.iter().enumerate() {
            if *v > src[best] {
                best = k;
            }
        }
        dst[best] = T::one();
    }
    out
}

/// Uniform-weight geometric-mean fusion on a tape.
pub fn fuse_poe<'t, T: Scalar>(parts: &[GaussVar<'t, T>], prior_expert: bool) -> GaussVar<'t, T> {
    if let ([only], false) = (parts, prior_expert) {
        return *only;
    }
    let k = parts.len() + usize::from(prior_expert);
    let w = 1.0 / k as f64;
    let weighted: Vec<_> = parts.iter().map(|&p| (p, w)).collect();
    GaussVar::poe(&weighted, if prior_expert { w } else { 0.0 })
}

/// Content and style posterior of one modality on a tape.
#[derive(Debug)]
pub struct Posterior<'t, T: Scalar> {
    pub content: GaussVar<'t, T>,
    pub style: GaussVar<'t, T>,
}

impl<T: Scalar> Clone for Posterior<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Posterior<'_, T> {}

/// A model whose parameters sit on a tape.
pub struct Bound<'m, 'a, T: Scalar> {
    model: &'m MultimodalVAE<T>,
    tape: &'a Tape<T>,
    vars: Vec<Var<'a, T>>,
}

impl<'m, 'a, T: Scalar> Bound<'m, 'a, T> {
    pub fn model(&self) -> &'m MultimodalVAE<T> {
        self.model
    }

    pub fn tape(&self) -> &'a Tape<T> {
        self.tape
    }

    /// Parameter handles, in [`MultimodalVAE::params`] order.
    pub fn vars(&self) -> &[Var<'a, T>] {
        &self.vars
    }

    fn run(&self, layers: &[Layer], x: Var<'a, T>) -> Var<'a, T> {
        let mut h = x;
        for (l, layer) in layers.iter().enumerate() {
            h = h.matmul(self.vars[layer.w]).add_row(self.vars[layer.b]);
            if l + 1 < layers.len() {
                h = h.relu();
            }
        }
        h
    }

    pub fn encode(&self, j: usize, x: Var<'a, T>) -> Posterior<'a, T> {
        let c = self.model.partition.c_dim;
        let s = self.model.partition.s_dims[j];
        let out = self.run(&self.model.encoders[j], x);
        let lo = T::lit(LOG_VAR_MIN);
        let hi = T::lit(LOG_VAR_MAX);
        Posterior {
            content: GaussVar {
                mean: out.slice_cols(0, c),
                log_var: out.slice_cols(c, 2 * c).clamp(lo, hi),
            },
            style: GaussVar {
                mean: out.slice_cols(2 * c, 2 * c + s),
                log_var: out.slice_cols(2 * c + s, 2 * c + 2 * s).clamp(lo, hi),
            },
        }
    }

    /// Raw decoder output for `c ++ s`.
    pub fn decode(&self, j: usize, content: Var<'a, T>, style: Var<'a, T>) -> Var<'a, T> {
        let z = if style.cols() == 0 {
            content
        } else {
            Var::concat(&[content, style])
        };
        self.run(&self.model.decoders[j], z)
    }

    /// Per-row `log p(x_j | z)`, `[n, 1]`, from the decoder output.
    pub fn log_likelihood_rows(&self, j: usize, out: Var<'a, T>, x: Var<'a, T>) -> Var<'a, T> {
        let spec = &self.model.specs[j];
        let d = spec.element_count as f64;
        match spec.likelihood {
            Likelihood::Gaussian { scale } => (x - out)
                .square()
                .sum_rows()
                .scale(T::lit(-0.5 / (scale * scale)))
                .shift(T::lit(-d * (scale.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln()))),
            Likelihood::Laplace { scale } => (x - out)
                .abs()
                .sum_rows()
                .scale(T::lit(-1.0 / scale))
                .shift(T::lit(-d * (2.0 * scale).ln())),
            Likelihood::Categorical { alphabet } => {
                let n = out.rows();
                let positions = spec.element_count / alphabet;
                let logits = out.reshape(vec![n * positions, alphabet]);
                let lse = logits.logsumexp_rows();
                // subtract each row's normalizer through a [.., 1] x [1, alphabet] product
                let ones = self.tape.leaf(Tensor::full(vec![1, alphabet], T::one()));
                let log_probs = (logits - lse.matmul(ones)).reshape(vec![n, spec.element_count]);
                (log_probs * x).sum_rows()
            }
        }
    }
}

#[cfg(test)]
mod tests;
