//! Single executable over the whole pipeline: preprocess raw meter data,
//! synthesize desk-scale datasets, train one model, run cross-validated
//! benchmarks, and gradient-check the autodiff engine.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage/input error, 3 numeric
//! abort during training.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use occudet_core::data::{
    self, manual_features, read_processed, resample_hourly, summarize, synth_generate,
    DatasetSummary, Sample, SynthConfig,
};
use occudet_core::evaluation::{crossval, emit_report, kfold_plan, CrossvalResult};
use occudet_core::gradcheck::run_suite_with_corruption;
use occudet_core::models::{Model, ModelConfig, TrainingMeta, Variant};
use occudet_core::training::{fit, TrainConfig, TrainError};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "occudet", version)]
#[command(about = "Hourly smart-meter occupancy detection: preprocessing, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Resample raw 1 Hz meter data to the hourly processed format.
    Preprocess {
        /// Root directory of per-household raw data (see README for layout).
        /// Defaults to $OCCUDET_DATA_DIR when unset.
        #[arg(long, value_name = "DIR")]
        raw: Option<PathBuf>,
        /// Processed CSV to write.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Minimum per-hour completeness in both streams; hours below this
        /// exclude the whole day.
        #[arg(long, default_value_t = 0.95, value_name = "FRACTION")]
        min_complete: f64,
    },
    /// Generate a synthetic processed dataset.
    Synth {
        #[arg(long, value_name = "N")]
        households: usize,
        #[arg(long, value_name = "D")]
        days: usize,
        #[arg(long, default_value_t = 0, value_name = "S")]
        seed: u64,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Meter features per hour.
        #[arg(long, default_value_t = 9, value_name = "F")]
        features: usize,
        /// Scale of the occupancy-driven load; 0 produces label-independent
        /// features (a null-signal dataset).
        #[arg(long, default_value_t = 1.0, value_name = "B")]
        boost: f64,
    },
    /// Train one model on a processed dataset and write a checkpoint.
    Train {
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// One of: hybrid_concat, bilstm_then_transformer,
        /// transformer_then_bilstm, bilstm_attention.
        #[arg(long, value_name = "NAME")]
        variant: String,
        /// Optional key = value settings file (unknown keys are rejected).
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        /// Checkpoint path to write.
        #[arg(long, value_name = "CKPT")]
        out: PathBuf,
    },
    /// K-fold cross-validation of one or more variants, with reports.
    Crossval {
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Comma-separated variant names, or `all`.
        #[arg(long, value_name = "LIST", default_value = "all")]
        variants: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 0, value_name = "S")]
        seed: u64,
        /// Output directory for summary.csv, summary.txt, per_fold.csv and
        /// the run manifest.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Widen inputs with windowed statistics (mean/std/min/max/diff)
        /// before training.
        #[arg(long)]
        manual_features: bool,
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        /// Folds trained concurrently.
        #[arg(long, default_value_t = 1, value_name = "N")]
        jobs: usize,
    },
    /// Run the gradient-check suite over every op, layer and model variant.
    Gradcheck {
        #[arg(long, default_value_t = 0, value_name = "S")]
        seed: u64,
        /// Corrupt the named component's check (negative control).
        #[arg(long, hide = true, value_name = "COMPONENT")]
        corrupt: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            let numeric_abort = err.chain().any(|c| {
                matches!(
                    c.downcast_ref(),
                    Some(TrainError::NonFiniteGradient(_) | TrainError::NonFiniteLoss { .. })
                )
            });
            ExitCode::from(if numeric_abort { 3 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Preprocess {
            raw,
            out,
            min_complete,
        } => cmd_preprocess(raw, &out, min_complete),
        Command::Synth {
            households,
            days,
            seed,
            out,
            features,
            boost,
        } => cmd_synth(households, days, seed, &out, features, boost),
        Command::Train {
            data,
            variant,
            config,
            out,
        } => cmd_train(&data, &variant, config.as_deref(), &out),
        Command::Crossval {
            data,
            variants,
            k,
            seed,
            out,
            manual_features,
            config,
            jobs,
        } => cmd_crossval(
            &data,
            &variants,
            k,
            seed,
            &out,
            manual_features,
            config.as_deref(),
            jobs,
        ),
        Command::Gradcheck { seed, corrupt } => cmd_gradcheck(seed, corrupt.as_deref()),
    }
}

// ── preprocess ──────────────────────────────────────────────────────────

fn cmd_preprocess(raw: Option<PathBuf>, out: &Path, min_complete: f64) -> Result<ExitCode> {
    let raw = raw
        .or_else(|| std::env::var_os("OCCUDET_DATA_DIR").map(PathBuf::from))
        .ok_or_else(|| anyhow!("--raw is required (or set OCCUDET_DATA_DIR)"))?;
    if !(0.0..=1.0).contains(&min_complete) {
        bail!("--min-complete must lie in [0, 1], got {min_complete}");
    }
    let max_missing = 1.0 - min_complete;

    let households = data::list_households(&raw)
        .with_context(|| format!("reading raw directory {}", raw.display()))?;
    let mut samples: Vec<Sample> = Vec::new();
    let mut raw_days = 0usize;
    for household in &households {
        let days = data::load_raw(&raw, household)?;
        raw_days += days.len();
        for day in &days {
            if let Some(sample) = resample_hourly(day, max_missing) {
                samples.push(sample);
            }
        }
    }
    if raw_days == 0 {
        bail!("no raw day files found under {}", raw.display());
    }
    if samples.is_empty() {
        bail!("no day survived the completeness filter (min-complete = {min_complete})");
    }

    data::write_processed(out, &samples)?;
    let summary = summarize(&samples);
    print!("{}", summary_table(&summary));
    println!(
        "{} of {raw_days} raw days kept; processed dataset written to {}",
        samples.len(),
        out.display()
    );

    write_manifest(
        &manifest_path_for(out),
        "preprocess",
        &[
            ("raw", raw.display().to_string()),
            ("out", out.display().to_string()),
            ("min_complete", min_complete.to_string()),
        ],
    )?;
    Ok(ExitCode::SUCCESS)
}

fn summary_table(summary: &DatasetSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:>6} {:>16}", "Household", "Days", "Occupancy Ratio");
    for h in &summary.households {
        let _ = writeln!(
            out,
            "{:<12} {:>6} {:>16.4}",
            h.household, h.days, h.occupancy_ratio
        );
    }
    let _ = writeln!(
        out,
        "{:<12} {:>6} {:>16.4}",
        "Total", summary.total_days, summary.overall_ratio
    );
    out
}

// ── synth ───────────────────────────────────────────────────────────────

fn cmd_synth(
    households: usize,
    days: usize,
    seed: u64,
    out: &Path,
    features: usize,
    boost: f64,
) -> Result<ExitCode> {
    if households == 0 || days == 0 || features == 0 {
        bail!("--households, --days and --features must be >= 1");
    }
    let config = SynthConfig {
        households,
        days_per_household: days,
        features,
        seed,
        occupied_boost: boost,
    };
    let samples = synth_generate(&config);
    data::write_processed(out, &samples)?;
    let summary = summarize(&samples);
    print!("{}", summary_table(&summary));
    println!("synthetic dataset written to {}", out.display());

    write_manifest(
        &manifest_path_for(out),
        "synth",
        &[
            ("households", households.to_string()),
            ("days", days.to_string()),
            ("seed", seed.to_string()),
            ("features", features.to_string()),
            ("boost", boost.to_string()),
            ("out", out.display().to_string()),
        ],
    )?;
    Ok(ExitCode::SUCCESS)
}

// ── settings files ──────────────────────────────────────────────────────

/// Applies a flat `key = value` settings file over the defaults. Unknown
/// keys are rejected outright.
fn apply_settings(
    path: &Path,
    model: &mut ModelConfig,
    train: &mut TrainConfig,
) -> Result<()> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    for (idx, raw_line) in text.lines().enumerate() {
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}:{}: expected `key = value`", path.display(), idx + 1))?;
        let (key, value) = (key.trim(), value.trim());
        let loc = || format!("{}:{} ({key})", path.display(), idx + 1);

        macro_rules! parse {
            ($ty:ty) => {
                value
                    .parse::<$ty>()
                    .with_context(|| format!("{}: bad value `{value}`", loc()))?
            };
        }
        let optional_f64 = |value: &str| -> Result<Option<f64>> {
            if value == "none" {
                Ok(None)
            } else {
                Ok(Some(value.parse::<f64>().with_context(|| {
                    format!("{}: bad value `{value}`", loc())
                })?))
            }
        };

        match key {
            "lstm_hidden" => model.lstm_hidden = parse!(usize),
            "trans_width" => model.trans_width = parse!(usize),
            "heads" => model.heads = parse!(usize),
            "head_dim" => model.head_dim = parse!(usize),
            "ffn_width" => model.ffn_width = parse!(usize),
            "encoder_blocks" => model.encoder_blocks = parse!(usize),
            "dropout" => model.dropout = optional_f64(value)?,
            "seed" => {
                model.seed = parse!(u64);
                train.seed = model.seed;
            }
            "epochs" => train.epochs = parse!(usize),
            "batch_size" => train.batch_size = parse!(usize),
            "learning_rate" => train.learning_rate = parse!(f64),
            "beta1" => train.beta1 = parse!(f64),
            "beta2" => train.beta2 = parse!(f64),
            "eps" => train.eps = parse!(f64),
            "grad_clip" => train.grad_clip = optional_f64(value)?,
            "patience" => {
                train.patience = if value == "none" {
                    None
                } else {
                    Some(value.parse::<usize>().with_context(|| {
                        format!("{}: bad value `{value}`", loc())
                    })?)
                }
            }
            other => bail!(
                "{}:{}: unknown config key `{other}` (valid keys: lstm_hidden, trans_width, \
                 heads, head_dim, ffn_width, encoder_blocks, dropout, seed, epochs, batch_size, \
                 learning_rate, beta1, beta2, eps, grad_clip, patience)",
                path.display(),
                idx + 1
            ),
        }
    }
    Ok(())
}

fn settings_entries(model: &ModelConfig, train: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("variant", model.variant.to_string()),
        ("input_features", model.input_features.to_string()),
        ("seq_len", model.seq_len.to_string()),
        ("lstm_hidden", model.lstm_hidden.to_string()),
        ("trans_width", model.trans_width.to_string()),
        ("heads", model.heads.to_string()),
        ("head_dim", model.head_dim.to_string()),
        ("ffn_width", model.ffn_width.to_string()),
        ("encoder_blocks", model.encoder_blocks.to_string()),
        ("dropout", model.dropout.map_or("none".into(), |p| p.to_string())),
        ("seed", model.seed.to_string()),
        ("epochs", train.epochs.to_string()),
        ("batch_size", train.batch_size.to_string()),
        ("learning_rate", train.learning_rate.to_string()),
        ("beta1", train.beta1.to_string()),
        ("beta2", train.beta2.to_string()),
        ("eps", train.eps.to_string()),
        ("grad_clip", train.grad_clip.map_or("none".into(), |c| c.to_string())),
        ("patience", train.patience.map_or("none".into(), |p| p.to_string())),
    ]
}

// ── train ───────────────────────────────────────────────────────────────

fn load_dataset(path: &Path) -> Result<Vec<Sample>> {
    let samples =
        read_processed(path).with_context(|| format!("reading dataset {}", path.display()))?;
    if samples.is_empty() {
        bail!("dataset {} contains no samples", path.display());
    }
    Ok(samples)
}

fn cmd_train(
    data_path: &Path,
    variant: &str,
    config: Option<&Path>,
    out: &Path,
) -> Result<ExitCode> {
    let variant = Variant::parse(variant)?;
    let samples = load_dataset(data_path)?;

    let mut model_config = ModelConfig::defaults(variant);
    model_config.seq_len = samples[0].seq_len();
    model_config.input_features = samples[0].features();
    let mut train_config = TrainConfig::default();
    if let Some(path) = config {
        apply_settings(path, &mut model_config, &mut train_config)?;
    }

    let stats = data::normalize_fit(&samples)?;
    let normalized = data::normalize_apply(&stats, &samples);

    let mut model = Model::build(&model_config)?;
    let trace = fit(&mut model, &normalized, None, &train_config)?;

    let meta = TrainingMeta {
        epochs: trace.epochs.len(),
        final_loss: trace.final_train_loss(),
    };
    model.save(out, Some(&meta))?;
    let trace_path = PathBuf::from(format!("{}.trace.csv", out.display()));
    trace.write_csv(&trace_path)?;

    println!(
        "trained {variant} for {} epochs; final training loss {:.6}",
        meta.epochs, meta.final_loss
    );
    println!("checkpoint: {}", out.display());
    println!("trace: {}", trace_path.display());

    let mut entries = vec![
        ("data", data_path.display().to_string()),
        ("out", out.display().to_string()),
    ];
    entries.extend(settings_entries(&model_config, &train_config));
    write_manifest(&manifest_path_for(out), "train", &entries)?;
    Ok(ExitCode::SUCCESS)
}

// ── crossval ────────────────────────────────────────────────────────────

fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    if list == "all" {
        return Ok(Variant::ALL.to_vec());
    }
    list.split(',')
        .map(|name| Variant::parse(name.trim()).map_err(Into::into))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_crossval(
    data_path: &Path,
    variants: &str,
    k: usize,
    seed: u64,
    out: &Path,
    with_manual_features: bool,
    config: Option<&Path>,
    jobs: usize,
) -> Result<ExitCode> {
    let variants = parse_variants(variants)?;
    let mut samples = load_dataset(data_path)?;
    if with_manual_features {
        samples = samples
            .iter()
            .map(|s| manual_features(s, 3))
            .collect::<Result<Vec<_>, _>>()?;
    }
    let plan = kfold_plan(samples.len(), k, seed)?;

    let mut results: Vec<(String, CrossvalResult)> = Vec::new();
    for variant in &variants {
        let mut model_config = ModelConfig::defaults(*variant);
        model_config.seq_len = samples[0].seq_len();
        model_config.input_features = samples[0].features();
        model_config.seed = seed;
        let mut train_config = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        if let Some(path) = config {
            apply_settings(path, &mut model_config, &mut train_config)?;
        }

        let label = if with_manual_features {
            format!("{variant}+features")
        } else {
            variant.to_string()
        };
        eprintln!("cross-validating {label} (k = {k})...");
        let result = crossval(&model_config, &train_config, &samples, &plan, jobs)?;
        for outcome in &result.per_fold {
            if let Err(reason) = &outcome.result {
                eprintln!("warning: {label} fold {} failed: {reason}", outcome.fold);
            }
        }
        results.push((label, result));
    }

    let mut manifest = String::new();
    let _ = writeln!(manifest, "subcommand = crossval");
    let _ = writeln!(manifest, "artifact_version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(manifest, "timestamp = {}", unix_timestamp());
    let _ = writeln!(manifest, "data = {}", data_path.display());
    let _ = writeln!(manifest, "k = {k}");
    let _ = writeln!(manifest, "seed = {seed}");
    let _ = writeln!(manifest, "jobs = {jobs}");
    let _ = writeln!(manifest, "manual_features = {with_manual_features}");
    let _ = writeln!(
        manifest,
        "variants = {}",
        variants
            .iter()
            .map(Variant::as_str)
            .collect::<Vec<_>>()
            .join(",")
    );
    {
        let summary = summarize(&samples);
        let _ = writeln!(manifest, "samples = {}", summary.total_days);
        let _ = writeln!(manifest, "occupancy_ratio = {:.4}", summary.overall_ratio);
    }
    if let Some((_, first)) = results.first() {
        let _ = writeln!(manifest, "folds = {}", first.per_fold.len());
    }
    {
        // Resolved settings of the last variant run (shared across variants).
        let mut model_config = ModelConfig::defaults(variants[0]);
        model_config.seq_len = samples[0].seq_len();
        model_config.input_features = samples[0].features();
        model_config.seed = seed;
        let mut train_config = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        if let Some(path) = config {
            apply_settings(path, &mut model_config, &mut train_config)?;
        }
        for (key, value) in settings_entries(&model_config, &train_config) {
            if key != "variant" {
                let _ = writeln!(manifest, "{key} = {value}");
            }
        }
    }

    let files = emit_report(&results, &manifest, out)?;
    print!(
        "{}",
        std::fs::read_to_string(out.join("summary.txt")).unwrap_or_default()
    );
    for file in files {
        println!("wrote {}", file.display());
    }
    Ok(ExitCode::SUCCESS)
}

// ── gradcheck ───────────────────────────────────────────────────────────

fn cmd_gradcheck(seed: u64, corrupt: Option<&str>) -> Result<ExitCode> {
    let report = run_suite_with_corruption(seed, corrupt);
    if let Some(name) = corrupt {
        if !report.contains(name) {
            bail!("unknown component `{name}`; run without --corrupt to list components");
        }
    }
    println!("{:<32} {:>12} {:>9} {:>7}", "component", "max_rel_err", "tol", "status");
    for check in &report.checks {
        println!(
            "{:<32} {:>12.3e} {:>9.0e} {:>7}",
            check.name,
            check.max_rel_error,
            check.tolerance,
            if check.passed() { "PASS" } else { "FAIL" }
        );
    }
    if report.all_passed() {
        println!("all {} components pass", report.checks.len());
        Ok(ExitCode::SUCCESS)
    } else {
        let failing: Vec<&str> = report.failures().map(|c| c.name).collect();
        eprintln!("gradient check FAILED for: {}", failing.join(", "));
        Ok(ExitCode::from(1))
    }
}

// ── manifests ───────────────────────────────────────────────────────────

fn manifest_path_for(out: &Path) -> PathBuf {
    PathBuf::from(format!("{}.manifest", out.display()))
}

fn unix_timestamp() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn write_manifest(path: &Path, subcommand: &str, entries: &[(&str, String)]) -> Result<()> {
    let mut text = String::new();
    let _ = writeln!(text, "subcommand = {subcommand}");
    let _ = writeln!(text, "artifact_version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(text, "timestamp = {}", unix_timestamp());
    for (key, value) in entries {
        let _ = writeln!(text, "{key} = {value}");
    }
    std::fs::write(path, text).with_context(|| format!("writing manifest {}", path.display()))?;
    Ok(())
}
