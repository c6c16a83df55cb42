use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dkfac_core::config::load_config;
use dkfac_core::data::{SyntheticKind, SyntheticParams};
use dkfac_core::distsim::AlgorithmKind;
use dkfac_core::kfac::InvType;
use dkfac_core::runner::{cmd_cost, cmd_gen_data, cmd_train, summarize, CostArgs};
use dkfac_core::verify::{run_suite, Suite};
use dkfac_core::{Error, Result};

/// Distributed K-FAC simulator: training runs, cost model and self-checks.
#[derive(Parser)]
#[command(name = "dkfac", version)]
struct Cli {
    /// Run seed; overrides `run.seed` in a config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `run.out_dir` in a config.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train per a config file or a previous run's run.json.
    Train {
        config: PathBuf,
        /// `section.key=value` overrides, e.g. `--train.workers=8`.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Per-iteration cost model over a layer manifest.
    Cost {
        /// Layer manifest (`d_in d_out` per line); `resnet50` or omitted
        /// selects the bundled ResNet-50 manifest.
        manifest: Option<PathBuf>,
        /// Worker counts.
        #[arg(long = "p", value_delimiter = ',', default_values_t = vec![1u64, 2, 4, 8, 64])]
        workers: Vec<u64>,
        /// Algorithms.
        #[arg(long = "alg", value_delimiter = ',', default_value = "ssgd,mpd_kfac_co,mpd_kfac_mo,dp_kfac")]
        algorithms: Vec<String>,
        #[arg(long, default_value = "eigen")]
        inv_type: String,
    },
    /// Run a self-check suite: oracle, grad, dist, cost or all.
    Verify { suite: String },
    /// Write a synthetic dataset as an IDX image/label pair.
    GenData {
        /// gaussian_blobs or deep_linear_regression.
        kind: String,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 8)]
        outputs: usize,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
        /// Ratio between the largest and smallest input feature scale.
        #[arg(long, default_value_t = 1.0)]
        condition: f64,
        /// File name prefix; defaults to the kind.
        #[arg(long)]
        prefix: Option<String>,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, mut overrides } => {
            if let Some(s) = cli.seed {
                overrides.push(format!("run.seed={s}"));
            }
            if let Some(d) = &cli.out_dir {
                overrides.push(format!("run.out_dir={}", d.display()));
            }
            let cfg = load_config(&config, &overrides)?;
            let files = cmd_train(&cfg)?;
            println!("{}", summarize(&files.outcome));
            println!("metrics    {}", files.metrics.display());
            println!("manifest   {}", files.manifest.display());
            println!("checkpoint {}", files.checkpoint.display());
            Ok(true)
        }
        Command::Cost { manifest, workers, algorithms, inv_type } => {
            let algorithms = algorithms
                .iter()
                .map(|a| a.parse::<AlgorithmKind>())
                .collect::<Result<Vec<_>>>()?;
            let args = CostArgs {
                manifest,
                workers,
                algorithms,
                inv_type: inv_type.parse::<InvType>()?,
                out_dir: cli.out_dir,
            };
            let (_, table) = cmd_cost(&args)?;
            print!("{table}");
            Ok(true)
        }
        Command::Verify { suite } => {
            let report = run_suite(suite.parse::<Suite>()?, cli.seed.unwrap_or(0));
            println!("{report}");
            Ok(report.passed())
        }
        Command::GenData { kind, samples, dim, classes, outputs, noise, radius, condition, prefix } => {
            let kind: SyntheticKind = kind.parse()?;
            let params = SyntheticParams { kind, samples, dim, classes, outputs, noise, radius, condition };
            let dir = cli.out_dir.unwrap_or_else(|| PathBuf::from("."));
            let prefix = prefix.unwrap_or_else(|| kind.to_string());
            let (images, labels) = cmd_gen_data(&params, cli.seed.unwrap_or(0), &dir, &prefix)?;
            println!("images {}", images.display());
            println!("labels {}", labels.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
