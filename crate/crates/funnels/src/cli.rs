//! Command-line entry points: train, eval, sample, latent.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::data::{dequantize, load_idx_images, parse_csv, reduce_bits, write_csv};
use crate::error::{FunnelError, Result};
use crate::metrics::{anomaly_ratio, bits_per_dim, ks_statistic, MetricsReport};
use crate::model::{load_checkpoint, save_checkpoint, FlowModel};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::{self, mean_log_likelihood, metrics_to_jsonl, restore, TrainConfig};

#[derive(Parser)]
#[command(name = "funnels", about = "Density estimation with dimension-reducing flow layers", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON config; writes a checkpoint and metrics log.
    Train(TrainArgs),
    /// Score a dataset with a checkpoint; writes a JSON metrics report.
    Eval(EvalArgs),
    /// Draw samples from a checkpoint; writes a CSV.
    Sample(SampleArgs),
    /// Encode a dataset to the latent space; writes a CSV and prints the KS
    /// statistic of the latent marginal against N(0,1).
    Latent(LatentArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training configuration (unknown keys rejected).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoint.bin and metrics.jsonl.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file: numeric CSV, or IDX images (by .idx/.ubyte extension).
    #[arg(long)]
    data: PathBuf,
    /// Bit depth for image data (images are reduced to this depth and
    /// dequantized); 0 means plain continuous data.
    #[arg(long, default_value_t = 0)]
    bits: u8,
    /// Dequantization seed (recorded in the report's dataset field).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional second dataset scored as outliers; enables the BPD ratio.
    #[arg(long)]
    outlier_data: Option<PathBuf>,
    /// Report output path (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Samples output path (CSV).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LatentArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    bits: u8,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Encodings output path (CSV).
    #[arg(long)]
    out: PathBuf,
}

/// Parse argv and run; returns the process exit code (0 success, 1 runtime
/// failure, 2 usage error).
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Latent(a) => cmd_latent(&a),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn is_idx(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("idx") | Some("ubyte")
    )
}

/// Load an evaluation matrix from CSV or IDX (reduced + dequantized).
fn load_matrix(path: &Path, bits: u8, seed: u64) -> Result<Tensor> {
    if is_idx(path) {
        let mut images = load_idx_images(path)?;
        let bits = if bits == 0 { 8 } else { bits };
        if bits < 8 {
            images = reduce_bits(&images, 8, bits)?;
        }
        dequantize(&images, bits, seed)
    } else {
        parse_csv(&std::fs::read_to_string(path)?)
    }
}

fn load_model(path: &Path) -> Result<(FlowModel, ParamStore)> {
    let (spec, store) = load_checkpoint(path)?;
    Ok((spec.build()?, store))
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let config = TrainConfig::from_json(&std::fs::read_to_string(&args.config)?)?;
    let data = training::load_dataset(&config.dataset, config.seed)?;
    let model = config.model.build()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    model.init_params(&mut store, &mut rng);
    model.data_init(&mut store, &data.train)?;
    let result = training::train(&config, &model, &data, &mut store)?;
    restore(&mut store, &result.best_params);
    std::fs::create_dir_all(&args.out)?;
    save_checkpoint(&args.out.join("checkpoint.bin"), &config.model, &store)?;
    std::fs::write(args.out.join("metrics.jsonl"), metrics_to_jsonl(&result.metrics))?;
    let test_ll = mean_log_likelihood(&model, &store, &data.test)?;
    println!(
        "trained {} steps; best val LL {:.4} at step {}; test LL {:.4}",
        config.total_steps, result.best_val_ll, result.best_step, test_ll
    );
    Ok(())
}

fn latent_flat(model: &FlowModel, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let z = model.encode(store, x)?;
    Ok(Tensor::vector(z.data))
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (model, store) = load_model(&args.checkpoint)?;
    let x = load_matrix(&args.data, args.bits, args.seed)?;
    if x.last_dim() != model.in_dim {
        return Err(FunnelError::ShapeMismatch(format!(
            "data dimension {} vs model input {}",
            x.last_dim(),
            model.in_dim
        )));
    }
    let nats = mean_log_likelihood(&model, &store, &x)?;
    let ks = ks_statistic(&latent_flat(&model, &store, &x)?)?;
    let ratio = match &args.outlier_data {
        Some(path) => {
            let xo = load_matrix(path, args.bits, args.seed)?;
            let nats_o = mean_log_likelihood(&model, &store, &xo)?;
            Some(anomaly_ratio(
                bits_per_dim(nats_o, model.in_dim, args.bits)?,
                bits_per_dim(nats, model.in_dim, args.bits)?,
            )?)
        }
        None => None,
    };
    let dataset = format!(
        "{} ({}-bit, dequantize seed {})",
        args.data.display(),
        args.bits,
        args.seed
    );
    let report = MetricsReport::new(
        dataset,
        nats,
        model.in_dim,
        args.bits,
        ks,
        ratio,
        vec![args.out.display().to_string()],
    )?;
    std::fs::write(&args.out, report.to_json())?;
    println!("{}", report.to_json());
    Ok(())
}

fn cmd_sample(args: &SampleArgs) -> Result<()> {
    let (model, store) = load_model(&args.checkpoint)?;
    let mut rng = ChaCha12Rng::seed_from_u64(args.seed);
    let samples = model.sample(&store, args.n, args.temperature, &mut rng)?;
    write_csv(&args.out, &samples)?;
    println!("wrote {} samples to {}", args.n, args.out.display());
    Ok(())
}

fn cmd_latent(args: &LatentArgs) -> Result<()> {
    let (model, store) = load_model(&args.checkpoint)?;
    let x = load_matrix(&args.data, args.bits, args.seed)?;
    let z = model.encode(&store, &x)?;
    write_csv(&args.out, &z)?;
    let ks = ks_statistic(&Tensor::vector(z.data))?;
    println!("ks_statistic: {ks:.6}");
    Ok(())
}
