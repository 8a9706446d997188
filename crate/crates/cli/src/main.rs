use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use otcr_cli::config::apply_override;
use otcr_cli::run::{cmd_ablate, cmd_bench, cmd_eval, cmd_sweep, cmd_train};
use otcr_cli::{CliError, Result, RunConfig};

#[derive(Parser)]
#[command(name = "otcr", version, about = "Proximity-aware counterfactual regression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds (overrides `seeds`).
    #[arg(long, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
    /// Top-level override, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train per seed and report within-sample and out-of-sample metrics.
    Train(Common),
    /// Evaluate a saved checkpoint on `eval_split`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the 2×2 grid over `use_lpr` and `use_isp`.
    Ablate(Common),
    /// Sweep one of λ, κ or P.
    Sweep(Common),
    /// Time the fused solver across batch sizes and dimensions.
    Bench(Common),
}

fn load(c: &Common) -> Result<RunConfig> {
    let text = std::fs::read_to_string(&c.config)?;
    let mut doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::config("<document>", e.to_string()))?;
    for o in &c.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override `{o}` is not key=value")))?;
        apply_override(&mut doc, k, v)?;
    }
    if let Some(out) = &c.out {
        apply_override(&mut doc, "out_dir", &serde_json::to_string(out)?)?;
    }
    if let Some(seeds) = &c.seed_list {
        apply_override(&mut doc, "seeds", &serde_json::to_string(seeds)?)?;
    }
    RunConfig::from_value(doc)
}

fn pretty<T: serde::Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train(c) => pretty(&cmd_train(&load(&c)?)?),
        Command::Eval { common, checkpoint } => pretty(&cmd_eval(&load(&common)?, &checkpoint)?),
        Command::Ablate(c) => pretty(&cmd_ablate(&load(&c)?)?),
        Command::Sweep(c) => pretty(&cmd_sweep(&load(&c)?)?.0),
        Command::Bench(c) => pretty(&cmd_bench(&load(&c)?)?.0),
    }
}

fn fail(err: &CliError) -> ExitCode {
    eprintln!("{}", err.to_json());
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::Usage(e.to_string())),
    };
    match run(cli) {
        Ok(text) => {
            // A closed stdout (e.g. piped into `head`) is not a failure of the run.
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}
