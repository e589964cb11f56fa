//! Subset-wise evaluation of a trained model on a dataset: latent probe,
//! conditional coherence, importance-sampled log-likelihood and Fréchet
//! quality, one row per (subset, metric, target).

use std::fmt::Write as _;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::diffengine::Tensor;
use crate::evalsuite::{
    coherence, linear_probe, loglik_importance, quality_frechet, EvalError, Oracle, ProbeConfig, MIN_QUALITY_SAMPLES,
};
use crate::model::{Fusion, MultimodalVAE};
use crate::scalar::Scalar;

pub const EVAL_SCHEMA: &str = "# mmjsd-eval v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Probe,
    Coherence,
    Loglik,
    Quality,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Probe, Metric::Coherence, Metric::Loglik, Metric::Quality];
}

impl FromStr for Metric {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "probe" => Ok(Self::Probe),
            "coherence" => Ok(Self::Coherence),
            "loglik" => Ok(Self::Loglik),
            "quality" => Ok(Self::Quality),
            _ => Err(EvalError::Probe(format!(
                "unknown metric {s:?} (probe|coherence|loglik|quality)"
            ))),
        }
    }
}

/// `"all"` or a comma-separated metric list.
pub fn parse_metrics(spec: &str) -> Result<Vec<Metric>, EvalError> {
    if spec.trim() == "all" {
        return Ok(Metric::ALL.to_vec());
    }
    spec.split(',').map(|s| s.trim().parse()).collect()
}

/// Letter of modality `j`: `A`, `B`, ...
pub fn modality_letter(j: usize) -> char {
    (b'A' + j as u8) as char
}

fn modality_index(token: &str, names: &[String]) -> Option<usize> {
    let t = token.trim();
    if let Some(j) = names.iter().position(|n| n == t) {
        return Some(j);
    }
    let mut chars = t.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_uppercase() => {
            let j = (c as u8 - b'A') as usize;
            (j < names.len()).then_some(j)
        }
        _ => None,
    }
}

/// Parses `"A;B;A,B"` (letters or modality names) or `"all"` into masks.
/// `"all"` lists every non-empty subset, smaller subsets first.
pub fn parse_subsets(spec: &str, names: &[String]) -> Result<Vec<Vec<bool>>, EvalError> {
    let m = names.len();
    if spec.trim() == "all" {
        let mut masks: Vec<Vec<bool>> = (1u32..1 << m)
            .map(|bits| (0..m).map(|j| bits >> j & 1 == 1).collect())
            .collect();
        masks.sort_by_key(|mask: &Vec<bool>| {
            let size = mask.iter().filter(|&&b| b).count();
            let order: Vec<usize> = mask.iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j).collect();
            (size, order)
        });
        return Ok(masks);
    }
    let mut out = Vec::new();
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let mut mask = vec![false; m];
        for tok in part.split(',') {
            let j = modality_index(tok, names).ok_or_else(|| EvalError::UnknownModality(tok.trim().to_string()))?;
            mask[j] = true;
        }
        out.push(mask);
    }
    if out.is_empty() {
        return Err(EvalError::Probe("no subsets given".into()));
    }
    Ok(out)
}

/// `"A,C"` for a mask.
pub fn subset_label(mask: &[bool]) -> String {
    mask.iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(j, _)| modality_letter(j).to_string())
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub probe: ProbeConfig,
    /// Rows at the end of the training set the probe is fit on.
    pub probe_rows: usize,
    pub importance_samples: usize,
    /// Rows of the evaluation set used for the log-likelihood.
    pub loglik_rows: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            probe_rows: 256,
            importance_samples: 64,
            loglik_rows: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub subset: String,
    pub metric: String,
    /// Target modality name, `joint`, or `-`.
    pub target: String,
    pub value: f64,
}

/// Evaluates `model` on `test`, fitting probes on the tail of `train`.
pub fn evaluate<T: Scalar>(
    model: &MultimodalVAE<T>,
    train: &Dataset,
    test: &Dataset,
    subsets: &[Vec<bool>],
    metrics: &[Metric],
    opts: &EvalOptions,
) -> Result<Vec<EvalRow>, EvalError> {
    let names: Vec<String> = model.specs().iter().map(|s| s.name.clone()).collect();
    let oracles = names
        .iter()
        .map(|n| Oracle::for_modality(n, test.text_length))
        .collect::<Result<Vec<_>, _>>()?;
    let test_batch = test.full_batch::<T>().map_err(|e| EvalError::Probe(e.to_string()))?;
    let test_labels = test.labels();
    let k = opts.probe_rows.min(train.len());
    let probe_idx: Vec<usize> = (train.len() - k..train.len()).collect();
    let probe_batch = train
        .full_batch::<T>()
        .map_err(|e| EvalError::Probe(e.to_string()))?
        .select(&probe_idx)?;
    let probe_labels = probe_batch.labels().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut rows = Vec::new();
    let mut push = |subset: &str, metric: &str, target: &str, value: f64| {
        rows.push(EvalRow {
            subset: subset.to_string(),
            metric: metric.to_string(),
            target: target.to_string(),
            value,
        })
    };
    for mask in subsets {
        let label = subset_label(mask);
        for metric in metrics {
            match metric {
                Metric::Probe => {
                    for (name, prior_expert) in [("probe", false), ("probe_prior_expert", true)] {
                        let fusion = Fusion::Poe { prior_expert };
                        let tr: Tensor<f64> = model.infer_joint(&probe_batch, mask, fusion)?.mean().cast();
                        let te: Tensor<f64> = model.infer_joint(&test_batch, mask, fusion)?.mean().cast();
                        let acc = linear_probe(&tr, &probe_labels, &te, &test_labels, opts.probe)?;
                        push(&label, name, "-", acc);
                    }
                }
                Metric::Coherence | Metric::Quality => {
                    let generated =
                        model.conditional_generate(&test_batch, mask, Fusion::Poe { prior_expert: true }, &mut rng)?;
                    if *metric == Metric::Coherence {
                        let c = coherence(&generated, &oracles, &test_labels, test.num_classes)?;
                        for (name, v) in names.iter().zip(&c.per_modality) {
                            push(&label, "coherence", name, *v);
                        }
                        push(&label, "coherence", "joint", c.joint);
                    } else if test.len() >= MIN_QUALITY_SAMPLES {
                        for (j, name) in names.iter().enumerate() {
                            let q = quality_frechet(&generated[j], test_batch.data(j), oracles[j])?;
                            push(&label, "quality", name, q);
                        }
                    }
                }
                Metric::Loglik => {
                    let n = opts.loglik_rows.min(test.len());
                    let idx: Vec<usize> = (0..n).collect();
                    let b = test_batch.select(&idx)?;
                    let ll = loglik_importance(
                        model,
                        &b,
                        mask,
                        Fusion::Poe { prior_expert: true },
                        opts.importance_samples,
                        &mut rng,
                    )?;
                    push(&label, "loglik", "-", ll);
                }
            }
        }
    }
    Ok(rows)
}

fn csv_cell(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Rows as CSV with the schema comment and a header.
pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = format!("{EVAL_SCHEMA}\nsubset,metric,target,value\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            csv_cell(&r.subset),
            csv_cell(&r.metric),
            csv_cell(&r.target),
            r.value
        )
        .unwrap();
    }
    out
}
