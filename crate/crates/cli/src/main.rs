use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ensemble_patch_cli::{cmd_eval, cmd_generate, cmd_make_scenes, cmd_verify_theory, CliError};

#[derive(Parser)]
#[command(name = "ensemble-patch", version, about = "Ensemble adversarial patch generation and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a patch against the configured ensemble.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a patch against grey and random baselines on a dataset.
    Eval {
        #[arg(long)]
        patch: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the ensemble stability claims numerically.
    VerifyTheory {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a synthetic scene set.
    MakeScenes {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { config, out } => {
            let summary = cmd_generate(&config, out.as_deref())?;
            let last = summary.run.history.last();
            println!(
                "wrote {} ({} epochs, final total {})",
                summary.out_dir.display(),
                summary.run.history.len(),
                last.map(|r| format!("{:.6}", r.loss.total)).unwrap_or_else(|| "n/a".into())
            );
        }
        Command::Eval { patch, dataset, config, out } => {
            let report = cmd_eval(&patch, &dataset, &config, &out)?;
            print!("{}", report.to_csv());
        }
        Command::VerifyTheory { trials, seed, out } => {
            let rows = cmd_verify_theory(trials, seed, &out)?;
            println!("{} checks written to {}", rows.len(), out.display());
        }
        Command::MakeScenes { spec, out } => {
            let manifest = cmd_make_scenes(&spec, &out)?;
            println!("{} scenes written to {}", manifest.entries.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
