use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use uda_cli::{exit_code, EXIT_OK};

#[derive(Parser)]
#[command(
    name = "uda",
    version,
    about = "Domain adaptation lab on synthetic segmentation scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set optim.critic.lr=1e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic data utilities.
    Dataset {
        #[command(subcommand)]
        action: DatasetCommand,
    },
    /// Train one configuration.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Train the full model and its ablations on shared data.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Seeds to run; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
    },
    /// Generate soft pseudo labels for a target set with a saved model.
    Label {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of scene pixmaps, e.g. the `target/` folder of `dataset gen`.
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        gamma: f64,
        #[arg(long = "selection-amount", default_value_t = 0.35)]
        selection_amount: f64,
        /// Config of the run that produced the checkpoint; found next to it by default.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "labels")]
        out: PathBuf,
    },
    /// Re-render tables from a metrics file, run directory, or ablation directory.
    Report { path: PathBuf },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Write both domains as pixmaps and label grids.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
}

fn execute(cli: Cli) -> anyhow::Result<String> {
    match cli.command {
        Command::Dataset {
            action: DatasetCommand::Gen { config, out },
        } => {
            let cfg = uda_cli::load_config(config.config.as_deref(), &config.overrides)?;
            uda_cli::dataset_gen(&cfg, &out)
        }
        Command::Train { config, out } => {
            let cfg = uda_cli::load_config(config.config.as_deref(), &config.overrides)?;
            let table = uda_cli::train(&cfg, &out)?;
            Ok(format!("{table}run written to {}\n", out.display()))
        }
        Command::Ablate { config, seeds, out } => {
            let cfg = uda_cli::load_config(config.config.as_deref(), &config.overrides)?;
            let seeds = if seeds.is_empty() {
                vec![cfg.seed]
            } else {
                seeds
            };
            uda_cli::ablate(&cfg, &seeds, &out)
        }
        Command::Label {
            checkpoint,
            target,
            gamma,
            selection_amount,
            config,
            out,
        } => {
            let config = config.or_else(|| uda_cli::run_config_for(&checkpoint));
            let cfg = uda_cli::load_config(config.as_deref(), &[])?;
            let s = uda_cli::label(&cfg, &checkpoint, &target, gamma, selection_amount, &out)?;
            Ok(s.render())
        }
        Command::Report { path } => uda_cli::report(&path),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::from(EXIT_OK as u8)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
