use std::path::PathBuf;
use std::process::ExitCode;

use boosted_ukf::sensing::Split;
use boosted_ukf_cli::commands::{cmd_datagen, cmd_report, cmd_run, cmd_train, ReportFormat};
use boosted_ukf_cli::{CliError, ExperimentConfig, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "boosted-ukf", version, about = "Inertia estimation with a learned virtual sensor")]
struct Cli {
    /// TOML experiment config; missing keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config and BOOSTED_UKF_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Reduced horizon, realization count, epochs and dataset size.
    #[arg(long, global = true)]
    ci_scale: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with reliability labels.
    Datagen {
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value = "dataset.json")]
        out: PathBuf,
    },
    /// Reweight a dataset, train the flow and export its Gaussian summary.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run the filters and write traces and results.
    Run {
        /// Flow summary for the boosted filter; trained inline when absent.
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Aggregate result files into a table.
    Report {
        files: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if cli.ci_scale {
        cfg = cfg.ci_scale();
    }
    let seed = cfg.resolve_seed(cli.seed)?;
    match cli.command {
        Command::Datagen { sigma, n, out } => {
            let ds = cmd_datagen(sigma.unwrap_or(cfg.dataset.sigma), n.unwrap_or(cfg.dataset.n), seed, &out)?;
            eprintln!(
                "wrote {} ({} train, {} meta, {} test)",
                out.display(),
                ds.split_len(Split::Train),
                ds.split_len(Split::Meta),
                ds.split_len(Split::Test)
            );
        }
        Command::Train { dataset, out_dir } => {
            let dir = out_dir.unwrap_or_else(|| cfg.output_dir.clone());
            let out = cmd_train(&cfg, seed, &dataset, &dir)?;
            eprintln!("wrote {}", out.summary.display());
        }
        Command::Run { summary, out_dir } => {
            let dir = out_dir.unwrap_or_else(|| cfg.output_dir.clone());
            let result = cmd_run(&cfg, seed, summary.as_deref(), &dir)?;
            print!("{}", result.table.render_text());
        }
        Command::Report { files, format } => {
            let format = match format {
                Format::Text => ReportFormat::Text,
                Format::Csv => ReportFormat::Csv,
            };
            let (_, text) = cmd_report(&files, format)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_byte(&e))
        }
    }
}

fn exit_byte(e: &CliError) -> u8 {
    e.exit_code() as u8
}
