//! `fedftn`: experiment runner for personalized federated denoising.
//!
//! Subcommands: `train`, `evaluate`, `adapt`, `compare`, `gen-data`.
//! Logging verbosity comes from the `FEDFTN_LOG_LEVEL` environment
//! variable (`error`, `info`, or `debug`); log output goes to stderr so
//! stdout stays parseable.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedftn_cli::commands::{cmd_adapt, cmd_compare, cmd_evaluate, cmd_gen_data, cmd_train};
use fedftn_cli::config::{ExperimentConfig, Overrides, Precision, Transport};
use fedftn_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(
    name = "fedftn",
    version,
    about = "Personalized federated denoising experiments on synthetic multi-site data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override the experiment seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, value_name = "DIR")]
    output: Option<String>,
    /// Override the transport: "inproc" or "socket:HOST:PORT".
    #[arg(long, value_name = "KIND")]
    transport: Option<String>,
    /// Override the numeric precision: "f32" or "f64".
    #[arg(long, value_name = "TYPE")]
    precision: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<ExperimentConfig> {
        let overrides = Overrides {
            seed: self.seed,
            output_dir: self.output.clone(),
            transport: self
                .transport
                .as_deref()
                .map(Transport::parse)
                .transpose()
                .map_err(|e| CliError::Config(e.to_string()))?,
            precision: self
                .precision
                .as_deref()
                .map(Precision::parse)
                .transpose()
                .map_err(|e| CliError::Config(e.to_string()))?,
        };
        let config = ExperimentConfig::load(&self.config)
            .map_err(|e| CliError::Config(e.to_string()))?
            .resolve(&overrides);
        config
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a federated training experiment and write a run directory.
    Train(TrainArgs),
    /// Score a checkpoint on its site's test split.
    Evaluate(EvaluateArgs),
    /// Fine-tune a checkpoint locally at a reduced learning rate.
    Adapt(AdaptArgs),
    /// Compare completed runs that share a dataset seed.
    Compare(CompareArgs),
    /// Materialize the config's synthetic datasets to disk.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint to evaluate.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Restrict to these count levels (comma-separated), e.g. "0.02,0.05".
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    levels: Option<Vec<f64>>,
}

#[derive(Args)]
struct AdaptArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint to adapt.
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Local fine-tuning passes.
    #[arg(long, default_value_t = fedftn_core::federation::ADAPT_EPOCHS)]
    epochs: usize,
    /// Fine-tuning learning rate.
    #[arg(long, default_value_t = fedftn_core::federation::ADAPT_LR)]
    lr: f64,
}

#[derive(Args)]
struct CompareArgs {
    /// Two or more run directories (each holding config.toml and
    /// metrics.csv).
    #[arg(required = true, value_name = "RUN_DIR")]
    runs: Vec<PathBuf>,
    /// Where to write the comparison artifacts.
    #[arg(long, value_name = "DIR", default_value = "compare")]
    output: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Cache directory; defaults to `<output_dir>/datasets`.
    #[arg(long, value_name = "DIR")]
    data_dir: Option<PathBuf>,
}

fn init_logging() {
    let level = std::env::var("FEDFTN_LOG_LEVEL").unwrap_or_else(|_| "error".to_string());
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .init();
}

fn run() -> CliResult<()> {
    match Cli::parse().command {
        Command::Train(args) => {
            let config = args.config.load()?;
            let outcome = cmd_train(&config, None)?;
            println!("run directory: {}", outcome.run_dir.display());
            println!("metrics: {} ({} rows)", outcome.metrics_csv.display(), outcome.rows);
            for ckpt in &outcome.checkpoints {
                println!("checkpoint: {}", ckpt.display());
            }
        }
        Command::Evaluate(args) => {
            let config = args.config.load()?;
            let outcome = cmd_evaluate(&config, &args.checkpoint, args.levels.as_deref())?;
            print!("{}", outcome.rendered_table);
            println!("per-sample rows: {}", outcome.csv_path.display());
        }
        Command::Adapt(args) => {
            let config = args.config.load()?;
            let outcome = cmd_adapt(&config, &args.checkpoint, args.epochs, args.lr)?;
            println!(
                "site {}: train recon {:.6} -> {:.6} over {} epochs",
                outcome.site_id,
                outcome.train_recon_before,
                outcome.train_recon_after,
                outcome.to_epoch - outcome.from_epoch
            );
            println!("adapted checkpoint: {}", outcome.adapted_checkpoint.display());
            println!("metrics: {}", outcome.metrics_csv.display());
        }
        Command::Compare(args) => {
            let outcome = cmd_compare(&args.runs, &args.output)?;
            print!("{}", outcome.table_text);
            println!("comparison CSV: {}", outcome.csv_path.display());
            for chart in &outcome.chart_paths {
                println!("chart: {}", chart.display());
            }
        }
        Command::GenData(args) => {
            let config = args.config.load()?;
            let root = args.data_dir.unwrap_or_else(|| {
                PathBuf::from(&config.experiment.output_dir).join("datasets")
            });
            let outcome = cmd_gen_data(&config, &root)?;
            println!(
                "wrote {} volumes under {}",
                outcome.volumes_written,
                outcome.root.display()
            );
            println!("manifest: {}", outcome.manifest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    init_logging();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
