//! Adam training loop with per-epoch metric logging.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::diffengine::{DiffError, Tape, Tensor};
use crate::model::MultimodalVAE;
use crate::objectives::{
    objective, ObjectiveBreakdown, ObjectiveError, ObjectiveKind, ObjectiveOptions, PriorKind, WeightConfig,
};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("model does not match dataset: {0}")]
    Mismatch(String),
    #[error("non-finite {term} = {value} at epoch {epoch}, step {step}")]
    NonFinite {
        epoch: usize,
        step: usize,
        term: String,
        value: f64,
    },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    pub prior: PriorKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub weights: WeightConfig,
    pub options: ObjectiveOptions,
    /// Stops after this many parameter updates, if set.
    pub max_steps: Option<usize>,
}

impl TrainConfig {
    /// Defaults for `M` modalities with the given weights.
    pub fn new(objective: ObjectiveKind, weights: WeightConfig) -> Self {
        Self {
            objective,
            prior: PriorKind::Geometric,
            epochs: 30,
            batch_size: 256,
            learning_rate: 1e-3,
            seed: 0,
            weights,
            options: ObjectiveOptions::default(),
            max_steps: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adam with fixed decay rates 0.9 / 0.999 and epsilon 1e-8.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    lr: f64,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(params: &[Tensor<T>], lr: f64) -> Self {
        Self {
            lr,
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) {
        self.step += 1;
        let (b1, b2) = (T::lit(Self::BETA1), T::lit(Self::BETA2));
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        let (lr, eps) = (T::lit(self.lr), T::lit(Self::EPS));
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                *x = *x - lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Sample-weighted mean breakdown of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub breakdown: ObjectiveBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<T> {
    pub model: MultimodalVAE<T>,
    pub log: Vec<EpochMetrics>,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Trains `model` on `dataset`; fully determined by the inputs.
pub fn train<T: Scalar>(
    mut model: MultimodalVAE<T>,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(DataError::Empty.into());
    }
    let counts = dataset.element_counts();
    let model_counts: Vec<usize> = model.specs().iter().map(|s| s.element_count).collect();
    if model_counts != counts {
        return Err(TrainError::Mismatch(format!(
            "model element counts {model_counts:?}, dataset {counts:?}"
        )));
    }
    config.weights.validate(model.modalities())?;

    let mut adam = Adam::new(model.params(), config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::new();
    let mut steps = 0;
    'epochs: for epoch in 1..=config.epochs {
        let mut sums: Option<(ObjectiveBreakdown, f64)> = None;
        let mut epoch_steps = 0;
        for batch in dataset.batches::<T>(config.batch_size, epoch_seed(config.seed, epoch))? {
            if config.max_steps.is_some_and(|m| steps >= m) {
                if epoch_steps == 0 {
                    break 'epochs;
                }
                break;
            }
            let grads = {
                let tape = Tape::new();
                let bound = model.bind(&tape);
                let loss = objective(
                    config.objective,
                    &bound,
                    &batch,
                    config.prior,
                    &config.weights,
                    &config.options,
                    &mut rng,
                )?;
                if let Some((term, value)) = loss.breakdown.non_finite() {
                    return Err(TrainError::NonFinite {
                        epoch,
                        step: steps,
                        term,
                        value,
                    });
                }
                let n = batch.len() as f64;
                accumulate(&mut sums, &loss.breakdown, n);
                let g = tape.backward(loss.total)?;
                bound.vars().iter().map(|&v| g.wrt(v)).collect::<Result<Vec<_>, _>>()?
            };
            adam.update(model.params_mut(), &grads);
            if let Some(name) = model
                .param_names()
                .iter()
                .zip(model.params())
                .find(|(_, p)| !p.all_finite())
                .map(|(n, _)| n.clone())
            {
                return Err(TrainError::NonFinite {
                    epoch,
                    step: steps,
                    term: format!("parameter {name}"),
                    value: f64::NAN,
                });
            }
            steps += 1;
            epoch_steps += 1;
        }
        if let Some((sum, n)) = sums {
            log.push(EpochMetrics {
                epoch,
                steps: epoch_steps,
                breakdown: scale(&sum, 1.0 / n),
            });
        }
    }
    Ok(TrainOutcome { model, log })
}

fn accumulate(acc: &mut Option<(ObjectiveBreakdown, f64)>, b: &ObjectiveBreakdown, n: f64) {
    let weighted = scale(b, n);
    *acc = Some(match acc.take() {
        None => (weighted, n),
        Some((s, total)) => (
            ObjectiveBreakdown {
                reconstruction: s.reconstruction.iter().zip(&weighted.reconstruction).map(|(a, b)| a + b).collect(),
                shared_divergence: s.shared_divergence + weighted.shared_divergence,
                style_divergence: s.style_divergence.iter().zip(&weighted.style_divergence).map(|(a, b)| a + b).collect(),
                total: s.total + weighted.total,
            },
            total + n,
        ),
    });
}

fn scale(b: &ObjectiveBreakdown, k: f64) -> ObjectiveBreakdown {
    ObjectiveBreakdown {
        reconstruction: b.reconstruction.iter().map(|v| v * k).collect(),
        shared_divergence: b.shared_divergence * k,
        style_divergence: b.style_divergence.iter().map(|v| v * k).collect(),
        total: b.total * k,
    }
}

pub const METRICS_SCHEMA: &str = "# mmjsd-metrics v1";

/// Metric log as CSV: a schema comment, a header, one row per epoch.
pub fn metrics_csv(log: &[EpochMetrics], modality_names: &[String]) -> String {
    let mut out = String::new();
    out.push_str(METRICS_SCHEMA);
    out.push('\n');
    out.push_str("epoch,steps,objective_total");
    for n in modality_names {
        write!(out, ",recon_{n}").unwrap();
    }
    out.push_str(",shared_div");
    for n in modality_names {
        write!(out, ",style_div_{n}").unwrap();
    }
    out.push('\n');
    for e in log {
        let b = &e.breakdown;
        write!(out, "{},{},{}", e.epoch, e.steps, b.total).unwrap();
        for v in &b.reconstruction {
            write!(out, ",{v}").unwrap();
        }
        write!(out, ",{}", b.shared_divergence).unwrap();
        for v in &b.style_divergence {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}
