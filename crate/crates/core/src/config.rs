//! Flat `key = value` configuration files. Blank lines and `#` comments are
//! ignored; unknown and repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

use crate::data::{trimodal_specs, Dataset, DatasetConfig};
use crate::gaussians::DistributionWeights;
use crate::model::{Fusion, LatentPartition, Likelihood, MultimodalVAE};
use crate::objectives::{likelihood_scales, ObjectiveKind, ObjectiveOptions, PriorKind, WeightConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key {key:?}; known keys: {known}")]
    UnknownKey { key: String, known: String },
    #[error("key {key:?}: {msg}")]
    Value { key: String, msg: String },
}

/// Parsed `key = value` pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected `key = value`, got {raw:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    msg: "empty key".into(),
                });
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    msg: format!("repeated key {k:?}"),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn check_known(&self, known: &[&str]) -> Result<(), ConfigError> {
        match self.entries.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(ConfigError::UnknownKey {
                key: k.clone(),
                known: known.join(", "),
            }),
            None => Ok(()),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: Display,
    {
        self.entries
            .get(key)
            .map(|v| {
                v.parse().map_err(|e: T::Err| ConfigError::Value {
                    key: key.into(),
                    msg: e.to_string(),
                })
            })
            .transpose()
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T::Err: Display,
    {
        self.entries
            .get(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse().map_err(|e: T::Err| ConfigError::Value {
                            key: key.into(),
                            msg: e.to_string(),
                        })
                    })
                    .collect()
            })
            .transpose()
    }
}

pub const DATASET_KEYS: &[&str] = &[
    "num_samples",
    "num_classes",
    "seed",
    "noise_std_a",
    "noise_std_b",
    "jitter",
    "text_length",
    "alphabet",
];

pub fn dataset_config(kv: &KeyValues) -> Result<DatasetConfig, ConfigError> {
    kv.check_known(DATASET_KEYS)?;
    let d = DatasetConfig::default();
    Ok(DatasetConfig {
        num_samples: kv.get("num_samples")?.unwrap_or(d.num_samples),
        num_classes: kv.get("num_classes")?.unwrap_or(d.num_classes),
        seed: kv.get("seed")?.unwrap_or(d.seed),
        noise_std_a: kv.get("noise_std_a")?.unwrap_or(d.noise_std_a),
        noise_std_b: kv.get("noise_std_b")?.unwrap_or(d.noise_std_b),
        jitter: kv.get("jitter")?.unwrap_or(d.jitter),
        text_length: kv.get("text_length")?.unwrap_or(d.text_length),
        alphabet: kv.get("alphabet")?.unwrap_or(d.alphabet),
    })
}

/// Fusion spelled `poe`, `poe_prior` or `moe`.
pub fn parse_fusion(s: &str) -> Result<Fusion, String> {
    match s {
        "poe" => Ok(Fusion::Poe { prior_expert: false }),
        "poe_prior" => Ok(Fusion::Poe { prior_expert: true }),
        "moe" => Ok(Fusion::Moe),
        _ => Err(format!("unknown fusion {s:?} (poe|poe_prior|moe)")),
    }
}

pub fn fusion_name(f: Fusion) -> &'static str {
    match f {
        Fusion::Poe { prior_expert: false } => "poe",
        Fusion::Poe { prior_expert: true } => "poe_prior",
        Fusion::Moe => "moe",
    }
}

/// Everything `train` needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub objective: ObjectiveKind,
    pub prior: PriorKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub max_steps: Option<usize>,
    pub beta: f64,
    /// Defaults to the number of modalities.
    pub beta_style: Option<f64>,
    /// Defaults to uniform over `M + 1`.
    pub pi: Option<Vec<f64>>,
    pub beta_per_modality: Vec<f64>,
    /// Defaults to the size-ratio rule.
    pub likelihood_scales: Option<Vec<f64>>,
    /// Extra factor on the size-ratio scale of the text modality (the last
    /// one). Ignored when `likelihood_scales` is given explicitly.
    pub text_weight: f64,
    pub c_dim: usize,
    pub s_dim: usize,
    pub hidden: Vec<usize>,
    /// Likelihood of the two image modalities.
    pub image_likelihood: Likelihood,
    pub js_samples: usize,
    pub fusion: Fusion,
}

pub const RUN_KEYS: &[&str] = &[
    "objective",
    "prior",
    "epochs",
    "batch_size",
    "learning_rate",
    "seed",
    "max_steps",
    "beta",
    "beta_style",
    "pi",
    "beta_per_modality",
    "likelihood_scales",
    "text_weight",
    "c_dim",
    "s_dim",
    "hidden",
    "image_likelihood",
    "js_samples",
    "fusion",
];

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveKind::MmjsdFactorized,
            prior: PriorKind::Geometric,
            epochs: 30,
            batch_size: 256,
            learning_rate: 1e-3,
            seed: 0,
            max_steps: None,
            beta: 0.5,
            beta_style: None,
            pi: None,
            beta_per_modality: vec![5.0, 0.5, 5.0],
            likelihood_scales: None,
            text_weight: 8.0,
            c_dim: 16,
            s_dim: 4,
            hidden: vec![256, 256],
            image_likelihood: Likelihood::Gaussian { scale: 0.3 },
            js_samples: ObjectiveOptions::default().js_samples,
            fusion: ObjectiveOptions::default().fusion,
        }
    }
}

fn value_err(key: &str, msg: impl ToString) -> ConfigError {
    ConfigError::Value {
        key: key.into(),
        msg: msg.to_string(),
    }
}

impl RunConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self, ConfigError> {
        kv.check_known(RUN_KEYS)?;
        let d = Self::default();
        let image_likelihood: Likelihood = kv.get("image_likelihood")?.unwrap_or(d.image_likelihood);
        if matches!(image_likelihood, Likelihood::Categorical { .. }) {
            return Err(value_err("image_likelihood", "images need gaussian or laplace"));
        }
        let fusion = match kv.get::<String>("fusion")? {
            Some(s) => parse_fusion(&s).map_err(|e| value_err("fusion", e))?,
            None => d.fusion,
        };
        let scales = match kv.get::<String>("likelihood_scales")?.as_deref() {
            None | Some("auto") => None,
            Some(_) => kv.list("likelihood_scales")?,
        };
        Ok(Self {
            objective: kv.get("objective")?.unwrap_or(d.objective),
            prior: kv.get("prior")?.unwrap_or(d.prior),
            epochs: kv.get("epochs")?.unwrap_or(d.epochs),
            batch_size: kv.get("batch_size")?.unwrap_or(d.batch_size),
            learning_rate: kv.get("learning_rate")?.unwrap_or(d.learning_rate),
            seed: kv.get("seed")?.unwrap_or(d.seed),
            max_steps: kv.get("max_steps")?,
            beta: kv.get("beta")?.unwrap_or(d.beta),
            beta_style: kv.get("beta_style")?,
            pi: kv.list("pi")?,
            beta_per_modality: kv.list("beta_per_modality")?.unwrap_or(d.beta_per_modality),
            likelihood_scales: scales,
            text_weight: kv.get("text_weight")?.unwrap_or(d.text_weight),
            c_dim: kv.get("c_dim")?.unwrap_or(d.c_dim),
            s_dim: kv.get("s_dim")?.unwrap_or(d.s_dim),
            hidden: kv.list("hidden")?.unwrap_or(d.hidden),
            image_likelihood,
            js_samples: kv.get("js_samples")?.unwrap_or(d.js_samples),
            fusion,
        })
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::from_kv(&KeyValues::parse(text)?)
    }

    /// Weights for a dataset with the given element counts.
    pub fn weights(&self, element_counts: &[usize]) -> Result<WeightConfig, ConfigError> {
        let m = element_counts.len();
        let pi = match &self.pi {
            Some(p) => DistributionWeights::new(p.clone()),
            None => DistributionWeights::uniform(m + 1),
        }
        .map_err(|e| value_err("pi", e))?;
        let likelihood_scales = match &self.likelihood_scales {
            Some(s) => s.clone(),
            None => {
                let mut s = likelihood_scales(element_counts).map_err(|e| value_err("likelihood_scales", e))?;
                if !(self.text_weight.is_finite() && self.text_weight > 0.0) {
                    return Err(value_err("text_weight", "must be positive"));
                }
                if let Some(last) = s.last_mut() {
                    *last *= self.text_weight;
                }
                s
            }
        };
        let w = WeightConfig {
            pi,
            beta: self.beta,
            beta_style: self.beta_style.unwrap_or(m as f64),
            likelihood_scales,
            beta_per_modality: self.beta_per_modality.clone(),
        };
        w.validate(m).map_err(|e| value_err("weights", e))?;
        Ok(w)
    }

    pub fn train_config(&self, element_counts: &[usize]) -> Result<TrainConfig, ConfigError> {
        let mut t = TrainConfig::new(self.objective, self.weights(element_counts)?);
        t.prior = self.prior;
        t.epochs = self.epochs;
        t.batch_size = self.batch_size;
        t.learning_rate = self.learning_rate;
        t.seed = self.seed;
        t.max_steps = self.max_steps;
        t.options = ObjectiveOptions {
            fusion: self.fusion,
            js_samples: self.js_samples,
        };
        t.validate().map_err(|e| value_err("train", e))?;
        Ok(t)
    }

    /// Fresh model for `dataset`, initialized from the run seed.
    pub fn model(&self, dataset: &Dataset) -> Result<MultimodalVAE<f32>, ConfigError> {
        let mut specs = trimodal_specs(dataset.text_length, &self.hidden);
        for s in &mut specs[..2] {
            s.likelihood = self.image_likelihood;
        }
        let partition = LatentPartition::uniform(self.c_dim, self.s_dim, specs.len());
        MultimodalVAE::new(specs, partition, self.seed).map_err(|e| value_err("model", e))
    }

    /// Canonical `key = value` text; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let ulist = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut out = vec![
            format!("objective = {}", self.objective),
            format!("prior = {}", self.prior),
            format!("epochs = {}", self.epochs),
            format!("batch_size = {}", self.batch_size),
            format!("learning_rate = {}", self.learning_rate),
            format!("seed = {}", self.seed),
            format!("beta = {}", self.beta),
            format!("beta_per_modality = {}", list(&self.beta_per_modality)),
            format!("text_weight = {}", self.text_weight),
            format!("c_dim = {}", self.c_dim),
            format!("s_dim = {}", self.s_dim),
            format!("hidden = {}", ulist(&self.hidden)),
            format!("image_likelihood = {}", self.image_likelihood),
            format!("js_samples = {}", self.js_samples),
            format!("fusion = {}", fusion_name(self.fusion)),
        ];
        if let Some(m) = self.max_steps {
            out.push(format!("max_steps = {m}"));
        }
        if let Some(b) = self.beta_style {
            out.push(format!("beta_style = {b}"));
        }
        if let Some(p) = &self.pi {
            out.push(format!("pi = {}", list(p)));
        }
        out.push(format!(
            "likelihood_scales = {}",
            self.likelihood_scales.as_deref().map_or("auto".to_string(), list)
        ));
        out.join("\n") + "\n"
    }
}
