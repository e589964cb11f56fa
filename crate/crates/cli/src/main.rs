use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mmjsd::checkpoint::{load_checkpoint, save_checkpoint};
use mmjsd::config::{dataset_config, KeyValues, RunConfig};
use mmjsd::data::{dataset_from_tensors, generate_dataset, load_dataset, save_dataset, Dataset, UNLABELED};
use mmjsd::model::Fusion;
use mmjsd::protocol::{eval_csv, evaluate, parse_metrics, parse_subsets, EvalOptions};
use mmjsd::trainer::{metrics_csv, train};
use mmjsd::verify::{self, Hooks, Level};

#[derive(Parser)]
#[command(name = "mmjsd", version, about = "Multimodal JS-divergence VAEs on a synthetic trimodal dataset")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trimodal dataset.
    DataGen {
        /// Dataset config (`key = value` lines); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus a metrics CSV.
    Train {
        /// Run config (`key = value` lines); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics CSV path; defaults to `<out>.metrics.csv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on every requested modality subset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Data the latent probe is fit on (its last rows). Without it the
        /// probe uses the last rows of `--data` and everything is scored on
        /// the rest.
        #[arg(long)]
        train_data: Option<PathBuf>,
        /// `all` or a list like `A;B;C;A,B;A,B,C`.
        #[arg(long, default_value = "all")]
        subsets: String,
        /// `all` or a subset of `probe,coherence,loglik,quality`.
        #[arg(long, default_value = "all")]
        metrics: String,
        #[arg(long, default_value_t = 64)]
        importance_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample from a checkpoint, conditionally or from the prior.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `none` or a subset like `A,C`.
        #[arg(long, default_value = "none")]
        condition_on: String,
        /// Conditioning data; the first `count` rows are used.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the property-verification suite.
    Verify {
        #[arg(long, value_enum, default_value_t = LevelArg::Quick)]
        level: LevelArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Swap in the misprinted PoE variance to check the suite catches it.
        #[arg(long, hide = true)]
        tamper_poe: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Quick,
    Full,
}

fn read_kv(path: Option<&Path>) -> Result<KeyValues> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            KeyValues::parse(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(KeyValues::default()),
    }
}

fn data_gen(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = dataset_config(&read_kv(config)?)?;
    let ds = generate_dataset(&cfg)?;
    save_dataset(out, &ds)?;
    let bytes = fs::metadata(out)?.len();
    println!("samples {} classes {} bytes {bytes}", ds.len(), ds.num_classes);
    Ok(())
}

fn train_cmd(config: Option<&Path>, data: &Path, out: &Path, seed: Option<u64>, metrics: Option<&Path>) -> Result<()> {
    let mut run = RunConfig::from_kv(&read_kv(config)?)?;
    if let Some(s) = seed {
        run.seed = s;
    }
    let ds = load_dataset(data).with_context(|| format!("loading {}", data.display()))?;
    let cfg = run.train_config(&ds.element_counts())?;
    let model = run.model(&ds)?;
    let t = Instant::now();
    let outcome = train(model, &ds, &cfg)?;
    for e in &outcome.log {
        eprintln!("epoch {:>3}  loss {:.4}", e.epoch, e.breakdown.total);
    }
    eprintln!("trained {} epochs in {:.1}s", outcome.log.len(), t.elapsed().as_secs_f64());

    let mut extra = vec![
        ("num_classes".to_string(), ds.num_classes.to_string()),
        ("text_length".to_string(), ds.text_length.to_string()),
    ];
    for line in run.to_text().lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            extra.push((format!("run.{k}"), v.to_string()));
        }
    }
    save_checkpoint(out, &outcome.model, &extra)?;
    let names: Vec<String> = outcome.model.specs().iter().map(|s| s.name.clone()).collect();
    let metrics_path = metrics.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".metrics.csv");
        PathBuf::from(p)
    });
    fs::write(&metrics_path, metrics_csv(&outcome.log, &names))?;
    println!("checkpoint {} metrics {}", out.display(), metrics_path.display());
    Ok(())
}

fn split_tail(ds: &Dataset, k: usize) -> (Dataset, Dataset) {
    let cut = ds.len().saturating_sub(k);
    let part = |samples: &[_]| Dataset {
        num_classes: ds.num_classes,
        text_length: ds.text_length,
        samples: samples.to_vec(),
    };
    (part(&ds.samples[cut..]), part(&ds.samples[..cut]))
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    checkpoint: &Path,
    data: &Path,
    train_data: Option<&Path>,
    subsets: &str,
    metrics: &str,
    importance_samples: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let (model, _) = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let ds = load_dataset(data).with_context(|| format!("loading {}", data.display()))?;
    let names: Vec<String> = model.specs().iter().map(|s| s.name.clone()).collect();
    let masks = parse_subsets(subsets, &names)?;
    let metrics = parse_metrics(metrics)?;
    let opts = EvalOptions {
        importance_samples,
        seed,
        ..Default::default()
    };
    let (probe_ds, test) = match train_data {
        Some(p) => (load_dataset(p)?, ds),
        None => {
            if ds.len() <= opts.probe_rows {
                bail!("{} samples leave none to score after the {}-row probe batch", ds.len(), opts.probe_rows);
            }
            split_tail(&ds, opts.probe_rows)
        }
    };
    let rows = evaluate(&model, &probe_ds, &test, &masks, &metrics, &opts)?;
    let csv = eval_csv(&rows);
    match out {
        Some(p) => fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn generate_cmd(
    checkpoint: &Path,
    condition_on: &str,
    data: Option<&Path>,
    count: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let (model, meta) = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let num_classes: usize = meta.require_meta("num_classes")?.parse()?;
    let text_length: usize = meta.require_meta("text_length")?.parse()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let generated = if condition_on.trim() == "none" {
        let g = model.random_generate(count, &mut rng);
        dataset_from_tensors(&g, None, num_classes, text_length)
    } else {
        let names: Vec<String> = model.specs().iter().map(|s| s.name.clone()).collect();
        let masks = parse_subsets(condition_on, &names)?;
        let [mask] = masks.as_slice() else {
            bail!("--condition-on takes a single subset, got {condition_on:?}");
        };
        let Some(data) = data else {
            bail!("--condition-on {condition_on} needs --data");
        };
        let ds = load_dataset(data).with_context(|| format!("loading {}", data.display()))?;
        if ds.len() < count {
            bail!("asked for {count} samples but {} has {}", data.display(), ds.len());
        }
        let idx: Vec<usize> = (0..count).collect();
        let batch = ds.full_batch::<f32>()?.select(&idx)?;
        let g = model.conditional_generate(&batch, mask, Fusion::Poe { prior_expert: true }, &mut rng)?;
        let labels: Vec<u32> = batch.labels().to_vec();
        dataset_from_tensors(&g, Some(&labels), num_classes, text_length)
    };
    save_dataset(out, &generated)?;
    let labeled = generated.samples.iter().filter(|s| s.label != UNLABELED).count();
    println!("generated {} samples ({labeled} labeled) to {}", generated.len(), out.display());
    Ok(())
}

fn verify_cmd(level: LevelArg, seed: u64, tamper_poe: bool) -> Result<bool> {
    let level = match level {
        LevelArg::Quick => Level::Quick,
        LevelArg::Full => Level::Full,
    };
    let mut hooks = Hooks::default();
    if tamper_poe {
        hooks.poe = verify::poe_misprinted_variance;
    }
    let t = Instant::now();
    let report = verify::run(level, &hooks, seed, |c| println!("{c}"));
    let failed = report.checks.iter().filter(|c| c.asserted && !c.passed).count();
    println!(
        "{}: {} properties, {failed} failed, {:.1}s",
        if report.passed() { "OK" } else { "FAILED" },
        report.checks.len(),
        t.elapsed().as_secs_f64()
    );
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::DataGen { config, out } => data_gen(config.as_deref(), &out).map(|_| true),
        Command::Train {
            config,
            data,
            out,
            seed,
            metrics,
        } => train_cmd(config.as_deref(), &data, &out, seed, metrics.as_deref()).map(|_| true),
        Command::Eval {
            checkpoint,
            data,
            train_data,
            subsets,
            metrics,
            importance_samples,
            seed,
            out,
        } => eval_cmd(
            &checkpoint,
            &data,
            train_data.as_deref(),
            &subsets,
            &metrics,
            importance_samples,
            seed,
            out.as_deref(),
        )
        .map(|_| true),
        Command::Generate {
            checkpoint,
            condition_on,
            data,
            count,
            seed,
            out,
        } => generate_cmd(&checkpoint, &condition_on, data.as_deref(), count, seed, &out).map(|_| true),
        Command::Verify { level, seed, tamper_poe } => verify_cmd(level, seed, tamper_poe),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
