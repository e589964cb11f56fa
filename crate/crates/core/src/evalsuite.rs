//! Evaluation protocol: linear latent probe, oracle-judged coherence,
//! importance-sampled log-likelihood and a Fréchet quality score.

use rand::Rng;
use thiserror::Error;

use crate::data::{shift, template, ALPHABET, BLANK, CHANNELS, PIXELS, WORDS};
use crate::diffengine::{logsumexp, Tape, Tensor};
use crate::gaussians::{frechet_gaussian_distance, normal_tensor, GaussError, GaussVar, Moments};
use crate::model::{fuse_poe, Fusion, ModalityBatch, ModelError, MultimodalVAE};
use crate::scalar::Scalar;

/// Fewest samples per side for [`quality_frechet`].
pub const MIN_QUALITY_SAMPLES: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("probe training labels hold a single class")]
    SingleClass,
    #[error("probe: {0}")]
    Probe(String),
    #[error("no oracle for modality {0:?}")]
    UnknownModality(String),
    #[error("{got} samples, need at least {min}")]
    SampleStarvation { got: usize, min: usize },
    #[error("need at least 1 importance sample, got {0}")]
    TooFewImportanceSamples(usize),
    #[error("non-finite importance weight in row {row}: {value}")]
    NonFiniteWeight { row: usize, value: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gauss(#[from] GaussError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.1,
        }
    }
}

/// Centers on the training mean and divides by the training RMS distance, a
/// rotation-invariant rescaling that keeps the fixed step size stable.
fn standardize(train: &Tensor<f64>, test: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let (n, d) = train.dims2();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(train.row_slice(i)) {
            *m += v / n as f64;
        }
    }
    let mut ss = 0.0;
    for i in 0..n {
        for (m, v) in mean.iter().zip(train.row_slice(i)) {
            ss += (v - m).powi(2);
        }
    }
    let rms = (ss / (n * d) as f64).sqrt();
    let rms = if rms > 0.0 { rms } else { 1.0 };
    let apply = |t: &Tensor<f64>| {
        let cols = t.cols();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(k, v)| (v - mean[k % cols]) / rms)
            .collect();
        Tensor::matrix(t.rows(), cols, data).expect("same shape")
    };
    (apply(train), apply(test))
}

/// Multinomial logistic regression trained by full-batch gradient descent
/// from zero, without regularization; returns accuracy on the test set.
pub fn linear_probe(
    train_x: &Tensor<f64>,
    train_y: &[u32],
    test_x: &Tensor<f64>,
    test_y: &[u32],
    cfg: ProbeConfig,
) -> Result<f64, EvalError> {
    if !train_x.is_matrix() || train_x.rows() != train_y.len() || train_x.rows() == 0 {
        return Err(EvalError::Probe("training latents and labels disagree".into()));
    }
    if !test_x.is_matrix() || test_x.rows() != test_y.len() || test_x.cols() != train_x.cols() {
        return Err(EvalError::Probe("test latents and labels disagree".into()));
    }
    if train_y.iter().all(|&y| y == train_y[0]) {
        return Err(EvalError::SingleClass);
    }
    let k = train_y.iter().chain(test_y).copied().max().unwrap_or(0) as usize + 1;
    let (x, tx) = standardize(train_x, test_x);
    let (n, d) = x.dims2();
    let mut w = vec![0.0; d * k];
    let mut b = vec![0.0; k];
    let mut logits = vec![0.0; n * k];
    let mut gw = vec![0.0; d * k];
    for _ in 0..cfg.steps {
        for i in 0..n {
            logits[i * k..(i + 1) * k].copy_from_slice(&b);
        }
        f64::gemm(n, d, k, x.data(), false, &w, false, 1.0, &mut logits);
        // softmax minus one-hot, scaled by 1/n
        let mut gb = vec![0.0; k];
        for i in 0..n {
            let row = &mut logits[i * k..(i + 1) * k];
            let lse = logsumexp(row);
            for (c, v) in row.iter_mut().enumerate() {
                *v = ((*v - lse).exp() - f64::from(c == train_y[i] as usize)) / n as f64;
                gb[c] += *v;
            }
        }
        f64::gemm(d, n, k, x.data(), true, &logits, false, 0.0, &mut gw);
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= cfg.learning_rate * g;
        }
        for (bi, g) in b.iter_mut().zip(&gb) {
            *bi -= cfg.learning_rate * g;
        }
    }
    let m = tx.rows();
    let mut scores = vec![0.0; m * k];
    for i in 0..m {
        scores[i * k..(i + 1) * k].copy_from_slice(&b);
    }
    f64::gemm(m, d, k, tx.data(), false, &w, false, 1.0, &mut scores);
    let correct = (0..m)
        .filter(|&i| argmax(&scores[i * k..(i + 1) * k]) == test_y[i] as usize)
        .count();
    Ok(correct as f64 / m as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Rule-based classifier of one modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Oracle {
    /// 8x8 gray glyph.
    Gray,
    /// 3x8x8 color glyph, judged after a channel-max projection.
    Color,
    /// One-hot text of the given length.
    Text { length: usize },
}

impl Oracle {
    pub fn for_modality(name: &str, text_length: usize) -> Result<Self, EvalError> {
        match name {
            "mod_a" => Ok(Self::Gray),
            "mod_b" => Ok(Self::Color),
            "mod_c" => Ok(Self::Text { length: text_length }),
            _ => Err(EvalError::UnknownModality(name.into())),
        }
    }

    pub fn classify(&self, x: &[f32], num_classes: usize) -> u32 {
        match self {
            Self::Gray => nearest_template(x, num_classes),
            Self::Color => nearest_template(&gray_projection(x), num_classes),
            Self::Text { length } => best_word(x, *length, num_classes),
        }
    }

    /// Feature vector for [`quality_frechet`].
    pub fn features(&self, x: &[f32]) -> Vec<f64> {
        match self {
            Self::Gray => template_scores(x),
            Self::Color => template_scores(&gray_projection(x)),
            Self::Text { length } => letter_histogram(x, *length),
        }
    }
}

/// Per-pixel channel maximum, min-max normalized to `[0, 1]`.
pub fn gray_projection(x: &[f32]) -> Vec<f32> {
    let g: Vec<f32> = (0..PIXELS)
        .map(|p| (0..CHANNELS).map(|c| x[c * PIXELS + p]).fold(f32::MIN, f32::max))
        .collect();
    let lo = g.iter().copied().fold(f32::MAX, f32::min);
    let hi = g.iter().copied().fold(f32::MIN, f32::max);
    if hi > lo {
        g.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; PIXELS]
    }
}

/// Mean squared distance to template `k`, minimized over one-pixel shifts.
fn template_distance(x: &[f32], k: usize) -> f32 {
    let t = template(k);
    let mut best = f32::MAX;
    for dy in -1..=1 {
        for dx in -1..=1 {
            let s = shift(&t, dy, dx);
            let d: f32 = x.iter().zip(&s).map(|(a, b)| (a - b) * (a - b)).sum();
            best = best.min(d);
        }
    }
    best / PIXELS as f32
}

fn nearest_template(x: &[f32], num_classes: usize) -> u32 {
    let mut best = (0, f32::MAX);
    for k in 0..num_classes {
        let d = template_distance(x, k);
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0 as u32
}

fn template_scores(x: &[f32]) -> Vec<f64> {
    (0..WORDS.len()).map(|k| template_distance(x, k) as f64).collect()
}

fn symbols(x: &[f32], length: usize) -> Vec<usize> {
    (0..length)
        .map(|p| {
            let row = &x[p * ALPHABET..(p + 1) * ALPHABET];
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Class whose word, placed at the best start with blanks around it, matches
/// the most argmax symbols.
fn best_word(x: &[f32], length: usize, num_classes: usize) -> u32 {
    let sym = symbols(x, length);
    let mut best = (0, 0);
    for (k, word) in WORDS[..num_classes].iter().enumerate() {
        for start in 0..=length.saturating_sub(word.len()) {
            let hits = (0..length)
                .filter(|&p| {
                    let want = p
                        .checked_sub(start)
                        .and_then(|i| word.as_bytes().get(i))
                        .map_or(BLANK, |&b| crate::data::letter_index(b));
                    sym[p] == want
                })
                .count();
            if hits > best.1 {
                best = (k, hits);
            }
        }
    }
    best.0 as u32
}

fn letter_histogram(x: &[f32], length: usize) -> Vec<f64> {
    let mut h = vec![0.0; ALPHABET];
    for s in symbols(x, length) {
        h[s] += 1.0 / length as f64;
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coherence {
    /// Oracle accuracy against the targets, per modality.
    pub per_modality: Vec<f64>,
    /// Fraction of samples where every modality matches its target.
    pub joint: f64,
}

/// Judges generated modalities (`[n, elements]` each) against `targets`.
pub fn coherence<T: Scalar>(
    generated: &[Tensor<T>],
    oracles: &[Oracle],
    targets: &[u32],
    num_classes: usize,
) -> Result<Coherence, EvalError> {
    let n = targets.len();
    if generated.len() != oracles.len() || generated.iter().any(|g| g.rows() != n) {
        return Err(EvalError::Probe("generated data and targets disagree".into()));
    }
    let mut hits = vec![0usize; generated.len()];
    let mut joint = 0usize;
    let mut row = Vec::new();
    for (i, &target) in targets.iter().enumerate() {
        let mut all = true;
        for (j, (g, o)) in generated.iter().zip(oracles).enumerate() {
            row.clear();
            row.extend(g.row_slice(i).iter().map(|v| v.to_f64_lossy() as f32));
            let ok = o.classify(&row, num_classes) == target;
            hits[j] += usize::from(ok);
            all &= ok;
        }
        joint += usize::from(all);
    }
    let n = n.max(1) as f64;
    Ok(Coherence {
        per_modality: hits.iter().map(|&h| h as f64 / n).collect(),
        joint: joint as f64 / n,
    })
}

/// Fréchet distance between Gaussian fits of oracle features of two sample sets.
pub fn quality_frechet<T: Scalar, U: Scalar>(
    generated: &Tensor<T>,
    reference: &Tensor<U>,
    oracle: Oracle,
) -> Result<f64, EvalError> {
    for t in [generated.rows(), reference.rows()] {
        if t < MIN_QUALITY_SAMPLES {
            return Err(EvalError::SampleStarvation {
                got: t,
                min: MIN_QUALITY_SAMPLES,
            });
        }
    }
    fn feats<S: Scalar>(t: &Tensor<S>, oracle: Oracle) -> Vec<Vec<f64>> {
        (0..t.rows())
            .map(|i| {
                let row: Vec<f32> = t.row_slice(i).iter().map(|v| v.to_f64_lossy() as f32).collect();
                oracle.features(&row)
            })
            .collect()
    }
    let a = Moments::from_samples(&feats(generated, oracle))?;
    let b = Moments::from_samples(&feats(reference, oracle))?;
    Ok(frechet_gaussian_distance(&a, &b)?)
}

/// Exact `log N(x; 0, (1 + s^2) I)`, the marginal of the linear-Gaussian toy.
pub fn linear_gaussian_log_marginal(x: &[f64], noise_std: f64) -> f64 {
    let var = 1.0 + noise_std * noise_std;
    x.iter()
        .map(|v| -0.5 * (v * v / var + (2.0 * std::f64::consts::PI * var).ln()))
        .sum()
}

/// Importance-sampled `log p(X)` averaged over the batch, with the content
/// proposal fused over `mask` and styles from their posteriors (available)
/// or the prior (missing).
pub fn loglik_importance<T: Scalar, R: Rng + ?Sized>(
    model: &MultimodalVAE<T>,
    batch: &ModalityBatch<T>,
    mask: &[bool],
    fusion: Fusion,
    samples: usize,
    rng: &mut R,
) -> Result<f64, EvalError> {
    Ok(loglik_importance_rows(model, batch, mask, fusion, samples, rng)?.iter().sum::<f64>() / batch.len() as f64)
}

/// Per-row estimates behind [`loglik_importance`].
pub fn loglik_importance_rows<T: Scalar, R: Rng + ?Sized>(
    model: &MultimodalVAE<T>,
    batch: &ModalityBatch<T>,
    mask: &[bool],
    fusion: Fusion,
    samples: usize,
    rng: &mut R,
) -> Result<Vec<f64>, EvalError> {
    model.check_batch(batch)?;
    if samples < 1 {
        return Err(EvalError::TooFewImportanceSamples(samples));
    }
    if mask.len() != model.modalities() {
        return Err(ModelError::Batch("mask length differs from modality count".into()).into());
    }
    if !mask.iter().any(|&m| m) {
        return Err(ModelError::EmptyMask.into());
    }
    let n = batch.len();
    let m = model.modalities();
    let c_dim = model.partition().c_dim;
    let mut encoded = Vec::new();
    for j in 0..m {
        encoded.push(if mask[j] { Some(model.encode(j, batch.data(j))?) } else { None });
    }
    let mut log_w = vec![Vec::with_capacity(samples); n];
    for _ in 0..samples {
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let parts: Vec<GaussVar<'_, T>> = encoded.iter().flatten().map(|(c, _)| c.on(&tape)).collect();
        let (content, log_q_c) = match fusion {
            Fusion::Poe { prior_expert } => {
                let q = fuse_poe(&parts, prior_expert);
                let c = q.sample(tape.leaf(normal_tensor(rng, n, c_dim)));
                (c, q.logpdf_rows(c))
            }
            Fusion::Moe => {
                let k = parts.len();
                let w = 1.0 / k as f64;
                let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
                let noise = normal_tensor(rng, n, c_dim);
                let mut c = Tensor::zeros(vec![n, c_dim]);
                for (i, &p) in picks.iter().enumerate() {
                    let (g, _) = encoded.iter().flatten().nth(p).expect("pick in range");
                    for d in 0..c_dim {
                        let std = (g.log_var.get(i, d) * T::lit(0.5)).exp();
                        c.data_mut()[i * c_dim + d] = g.mean.get(i, d) + std * noise.get(i, d);
                    }
                }
                let c = tape.leaf(c);
                let weighted: Vec<_> = parts.iter().map(|&g| (g, w)).collect();
                (c, crate::gaussians::mixture_logpdf_rows(&weighted, c))
            }
        };
        let prior_c = GaussVar::standard(&tape, n, c_dim);
        let mut row_w = prior_c.logpdf_rows(content) - log_q_c;
        for j in 0..m {
            let s_dim = model.partition().s_dims[j];
            let noise = tape.leaf(normal_tensor(rng, n, s_dim));
            let style = match &encoded[j] {
                Some((_, s)) if s_dim > 0 => {
                    let q = s.on(&tape);
                    let z = q.sample(noise);
                    let prior = GaussVar::standard(&tape, n, s_dim);
                    row_w = row_w + prior.logpdf_rows(z) - q.logpdf_rows(z);
                    z
                }
                // prior proposal: its density cancels against the prior term
                _ => noise,
            };
            let out = bound.decode(j, content, style);
            row_w = row_w + bound.log_likelihood_rows(j, out, tape.leaf(batch.data(j).clone()));
        }
        let values = row_w.to_tensor();
        for (i, lw) in log_w.iter_mut().enumerate() {
            let v = values.data()[i].to_f64_lossy();
            if !v.is_finite() {
                return Err(EvalError::NonFiniteWeight { row: i, value: v });
            }
            lw.push(v);
        }
    }
    let ln_s = (samples as f64).ln();
    Ok(log_w.iter().map(|w| logsumexp(w) - ln_s).collect())
}
