//! Command-line front end for the roadcast traffic forecaster:
//! synthetic data generation, training (plain or adversarial),
//! prediction, evaluation, ablation sweeps, and the historical-average
//! baseline.

mod settings;

use clap::{Parser, Subcommand};
use roadcast_core::data::{
    load_dataset_dir, make_windows, save_dataset, split_bounds, synthesize_dataset, SynthConfig,
    TrafficDataset, TIME_FORMAT,
};
use roadcast_core::metrics::{compute_metrics, kl_divergence, HistoricalAverage, MetricReport};
use roadcast_core::model::{Ablation, Forecaster, ModelConfig};
use roadcast_core::spatial::SpatialVariant;
use roadcast_core::train::{load_checkpoint, save_checkpoint, train, Normalizer};
use roadcast_core::{Error, Result, Tensor};
use serde::Serialize;
use settings::Settings;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Parser)]
#[command(
    name = "roadcast",
    version,
    about = "Spatio-temporal traffic forecasting on road networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clustered road network with daily traffic
    /// patterns and write it as a dataset directory.
    Synth {
        /// Number of road segments (vertices).
        #[arg(long, default_value_t = 20)]
        vertices: usize,
        /// Number of days to simulate.
        #[arg(long, default_value_t = 14)]
        days: u32,
        /// Minutes between observations.
        #[arg(long, default_value_t = 5)]
        interval: u32,
        /// Number of vertex clusters with distinct rush-hour shapes.
        #[arg(long, default_value_t = 4)]
        clusters: usize,
        /// Standard deviation of the measurement noise (km/h).
        #[arg(long, default_value_t = 2.0)]
        noise: f64,
        /// Strength of slowly decaying cluster-wide congestion
        /// episodes (km/h); 0 makes the series purely weekly-periodic
        /// plus noise.
        #[arg(long, default_value_t = 1.5)]
        ar_noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a forecaster on a dataset directory and save a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Settings file (`key = value` lines); defaults apply if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Train adversarially (generator + critic).
        #[arg(long)]
        gan: bool,
    },
    /// Predict every full window of a dataset with a trained checkpoint
    /// and write the forecasts as CSV.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the test split of a dataset.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Settings file; supplies the split (use the training one).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated horizon steps to report individually.
        #[arg(long, default_value = "3,6,12")]
        buckets: String,
        /// JSON report output path.
        #[arg(long)]
        report: PathBuf,
        /// Also report the KL divergence between the truth and
        /// prediction value distributions.
        #[arg(long)]
        kl: bool,
    },
    /// Train and score several model variants on the same data.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated variants: full, no_spatial, no_temporal,
        /// attention_off, gcn, dgcn, pgcn, lpgcn, lpgcn_adj.
        #[arg(long, default_value = "full,no_spatial,no_temporal,attention_off")]
        variants: String,
        #[arg(long)]
        report: PathBuf,
    },
    /// Score the historical-average baseline on the test split.
    Baseline {
        #[arg(long)]
        data: PathBuf,
        /// Settings file; supplies p, q, and the split.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "3,6,12")]
        buckets: String,
        #[arg(long)]
        report: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            vertices,
            days,
            interval,
            clusters,
            noise,
            ar_noise,
            seed,
            out,
        } => cmd_synth(vertices, days, interval, clusters, noise, ar_noise, seed, &out),
        Command::Train {
            data,
            config,
            out,
            gan,
        } => cmd_train(&data, config.as_deref(), &out, gan),
        Command::Predict { ckpt, data, out } => cmd_predict(&ckpt, &data, &out),
        Command::Evaluate {
            ckpt,
            data,
            config,
            buckets,
            report,
            kl,
        } => cmd_evaluate(&ckpt, &data, config.as_deref(), &buckets, &report, kl),
        Command::Ablate {
            data,
            config,
            variants,
            report,
        } => cmd_ablate(&data, config.as_deref(), &variants, &report),
        Command::Baseline {
            data,
            config,
            buckets,
            report,
        } => cmd_baseline(&data, config.as_deref(), &buckets, &report),
    }
}

fn load_settings(path: Option<&Path>) -> Result<Settings> {
    match path {
        Some(p) => Settings::from_file(p),
        None => Ok(Settings::default()),
    }
}

fn parse_buckets(spec: &str) -> Result<Vec<usize>> {
    let buckets: Vec<usize> = spec
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::config(format!("cannot parse horizon buckets `{spec}`")))?;
    if buckets.is_empty() {
        return Err(Error::config("no horizon buckets given"));
    }
    Ok(buckets)
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    vertices: usize,
    days: u32,
    interval: u32,
    clusters: usize,
    noise: f64,
    ar_noise: f64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let ds = synthesize_dataset(&SynthConfig {
        n: vertices,
        days,
        interval_minutes: interval,
        clusters,
        noise_sigma: noise,
        ar_sigma: ar_noise,
        seed,
    })?;
    save_dataset(&ds, out)?;
    println!(
        "wrote {} vertices x {} timestamps ({} days at {} min) to {}",
        ds.n(),
        ds.len(),
        days,
        interval,
        out.display()
    );
    Ok(())
}

fn cmd_train(data: &Path, config: Option<&Path>, out: &Path, gan: bool) -> Result<()> {
    let ds = load_dataset_dir(data)?;
    let mut settings = load_settings(config)?;
    let model_cfg = settings.model_config(ds.n(), ds.conditions())?;
    let train_cfg = settings.train_config(gan)?;
    settings.ensure_consumed()?;

    let mut model = Forecaster::new(model_cfg, Some(ds.graph()))?;
    println!(
        "training {} parameters on {} vertices ({} mode)",
        model.store().total_values(),
        ds.n(),
        if train_cfg.gan.is_some() {
            "adversarial"
        } else {
            "mse"
        }
    );
    let (outcome, normalizer) = train(&mut model, &ds, &train_cfg)?;
    for r in &outcome.history {
        println!(
            "epoch {:>3}{}  train {:.6}  val {:.6}  ({:.1}s)",
            r.epoch,
            r.phase.as_deref().map(|p| format!(" [{p}]")).unwrap_or_default(),
            r.train_loss,
            r.val_loss,
            r.seconds
        );
    }
    save_checkpoint(&model, &normalizer, out)?;
    println!(
        "best validation loss {:.6} at epoch {}; checkpoint saved to {}",
        outcome.best_val_loss,
        outcome.best_epoch,
        out.display()
    );
    Ok(())
}

/// Every full (input, horizon) window of the dataset, in time order.
fn full_windows(ds: &TrafficDataset, p: usize, q: usize) -> Result<Vec<usize>> {
    if ds.len() < p + q {
        return Err(Error::config(format!(
            "dataset has {} timestamps but one window needs p+q = {}",
            ds.len(),
            p + q
        )));
    }
    Ok((0..=ds.len() - p - q).collect())
}

fn predict_window(
    model: &Forecaster,
    normalizer: &Normalizer,
    ds: &TrafficDataset,
    start: usize,
) -> Result<Tensor> {
    let (p, q) = (model.config().p, model.config().q);
    let input = normalizer.apply(&ds.slice(start, start + p)?)?;
    let horizons = &ds.stamps()[start + p..start + p + q];
    let normalized = model.forward_predict(&input, horizons)?;
    normalizer.invert(&normalized)
}

fn cmd_predict(ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let (model, normalizer) = load_checkpoint(ckpt)?;
    let ds = load_dataset_dir(data)?;
    let cfg = model.config();
    if cfg.n != ds.n() || cfg.c != ds.conditions() {
        return Err(Error::config(format!(
            "checkpoint was trained on {} vertices x {} conditions, dataset has {} x {}",
            cfg.n,
            cfg.c,
            ds.n(),
            ds.conditions()
        )));
    }
    let (p, q) = (cfg.p, cfg.q);
    let starts = full_windows(&ds, p, q)?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(out)?);
    write!(file, "origin,timestamp,horizon")?;
    for v in 0..ds.n() {
        write!(file, ",v{v}")?;
    }
    writeln!(file)?;
    let (n, c) = (ds.n(), ds.conditions());
    for &start in &starts {
        let preds = predict_window(&model, &normalizer, &ds, start)?;
        let origin = ds.times()[start + p - 1].format(TIME_FORMAT);
        for h in 0..q {
            write!(
                file,
                "{},{},{}",
                origin,
                ds.times()[start + p + h].format(TIME_FORMAT),
                h + 1
            )?;
            for v in 0..n {
                write!(file, ",{}", preds.data()[(h * n + v) * c])?;
            }
            writeln!(file)?;
        }
    }
    file.flush()?;
    println!(
        "wrote {} forecasts ({} windows x {} horizons) to {}",
        starts.len() * q,
        starts.len(),
        q,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvaluationReport {
    windows: usize,
    buckets: Vec<usize>,
    #[serde(flatten)]
    metrics: MetricReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    kl_divergence: Option<f64>,
}

fn test_predictions(
    model: &Forecaster,
    normalizer: &Normalizer,
    ds: &TrafficDataset,
    split: (f64, f64, f64),
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let (p, q) = (model.config().p, model.config().q);
    let (_, _, test_w) = make_windows(ds, p, q, split)?;
    let mut preds = Vec::with_capacity(test_w.len());
    let mut truths = Vec::with_capacity(test_w.len());
    for w in &test_w {
        preds.push(predict_window(model, normalizer, ds, w.start)?);
        truths.push(w.target.clone());
    }
    Ok((preds, truths))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::config(format!("cannot serialize report: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn cmd_evaluate(
    ckpt: &Path,
    data: &Path,
    config: Option<&Path>,
    buckets: &str,
    report: &Path,
    kl: bool,
) -> Result<()> {
    let (model, normalizer) = load_checkpoint(ckpt)?;
    let ds = load_dataset_dir(data)?;
    let mut settings = load_settings(config)?;
    let train_cfg = settings.train_config(false)?;
    let buckets = parse_buckets(buckets)?;

    let (preds, truths) = test_predictions(&model, &normalizer, &ds, train_cfg.split)?;
    let metrics = compute_metrics(&preds, &truths, &buckets)?;
    let kl_divergence = if kl {
        let flat = |ts: &[Tensor]| -> Vec<f64> {
            ts.iter().flat_map(|t| t.data().to_vec()).collect()
        };
        Some(kl_divergence(&flat(&preds), &flat(&truths), 50)?)
    } else {
        None
    };
    let out = EvaluationReport {
        windows: preds.len(),
        buckets,
        metrics,
        kl_divergence,
    };
    write_json(&out, report)?;
    println!(
        "test MAE {:.4}  RMSE {:.4}  MAPE {:.2}%  over {} windows; report saved to {}",
        out.metrics.overall.mae,
        out.metrics.overall.rmse,
        out.metrics.overall.mape,
        out.windows,
        report.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct AblationEntry {
    variant: String,
    parameters: usize,
    best_val_loss: f64,
    epochs: usize,
    seconds: f64,
    test_mae: f64,
    test_rmse: f64,
    test_mape: f64,
}

/// A variant name is either an ablation or a spatial-convolution kind.
fn apply_variant(cfg: &mut ModelConfig, name: &str) -> Result<()> {
    if let Ok(ablation) = Ablation::from_str(name) {
        cfg.ablation = ablation;
        return Ok(());
    }
    if let Ok(variant) = SpatialVariant::from_str(name) {
        cfg.spatial_variant = variant;
        cfg.ablation = Ablation::Full;
        return Ok(());
    }
    Err(Error::config(format!(
        "unknown variant `{name}` (expected an ablation or a spatial convolution kind)"
    )))
}

fn cmd_ablate(data: &Path, config: Option<&Path>, variants: &str, report: &Path) -> Result<()> {
    let ds = load_dataset_dir(data)?;
    let mut settings = load_settings(config)?;
    let base_cfg = settings.model_config(ds.n(), ds.conditions())?;
    let train_cfg = settings.train_config(false)?;
    settings.ensure_consumed()?;

    let names: Vec<&str> = variants
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if names.is_empty() {
        return Err(Error::config("no variants given"));
    }

    let mut entries = Vec::with_capacity(names.len());
    for name in names {
        let mut cfg = base_cfg.clone();
        apply_variant(&mut cfg, name)?;
        let started = std::time::Instant::now();
        let mut model = Forecaster::new(cfg, Some(ds.graph()))?;
        let (outcome, normalizer) = train(&mut model, &ds, &train_cfg)?;
        let (preds, truths) = test_predictions(&model, &normalizer, &ds, train_cfg.split)?;
        let q = model.config().q;
        let metrics = compute_metrics(&preds, &truths, &[q])?;
        let entry = AblationEntry {
            variant: name.to_string(),
            parameters: model.store().total_values(),
            best_val_loss: outcome.best_val_loss,
            epochs: outcome.history.len(),
            seconds: started.elapsed().as_secs_f64(),
            test_mae: metrics.overall.mae,
            test_rmse: metrics.overall.rmse,
            test_mape: metrics.overall.mape,
        };
        println!(
            "{:<14} val {:.6}  test MAE {:.4}  ({} epochs, {:.1}s)",
            entry.variant, entry.best_val_loss, entry.test_mae, entry.epochs, entry.seconds
        );
        entries.push(entry);
    }
    write_json(&entries, report)?;
    println!("ablation report saved to {}", report.display());
    Ok(())
}

fn cmd_baseline(data: &Path, config: Option<&Path>, buckets: &str, report: &Path) -> Result<()> {
    let ds = load_dataset_dir(data)?;
    let mut settings = load_settings(config)?;
    let model_cfg = settings.model_config(ds.n(), ds.conditions())?;
    let train_cfg = settings.train_config(false)?;
    let buckets = parse_buckets(buckets)?;

    let (train_end, _) = split_bounds(ds.len(), train_cfg.split)?;
    let baseline = HistoricalAverage::fit(&ds, train_end)?;
    let (_, _, test_w) = make_windows(&ds, model_cfg.p, model_cfg.q, train_cfg.split)?;
    let mut preds = Vec::with_capacity(test_w.len());
    let mut truths = Vec::with_capacity(test_w.len());
    for w in &test_w {
        preds.push(baseline.predict(&w.horizon_times)?);
        truths.push(w.target.clone());
    }
    let metrics = compute_metrics(&preds, &truths, &buckets)?;
    let out = EvaluationReport {
        windows: preds.len(),
        buckets,
        metrics,
        kl_divergence: None,
    };
    write_json(&out, report)?;
    println!(
        "historical average: test MAE {:.4}  RMSE {:.4}  MAPE {:.2}%  over {} windows; report saved to {}",
        out.metrics.overall.mae,
        out.metrics.overall.rmse,
        out.metrics.overall.mape,
        out.windows,
        report.display()
    );
    Ok(())
}
