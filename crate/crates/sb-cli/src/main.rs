//! `sb`: train, evaluate, fold, and inspect branch-decomposed networks.
//!
//! Exit codes: 0 success, 1 a verification property failed, 2 bad
//! configuration or usage, 3 data problems, 4 model-file problems.
//! (clap reports usage errors with code 2 on its own, which matches.)

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sb_cli::commands;
use sb_cli::config::RunConfig;
use sb_cli::error::CliResult;

#[derive(Parser)]
#[command(name = "sb", version, about = "stochastic branch training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (JSON); either complete or a preset name plus
    /// overrides.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from scratch and write model.sbm plus metrics.csv.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a saved model on the configured test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model file to evaluate.
        #[arg(long)]
        model: PathBuf,
    },
    /// Fold branch layers into plain ones and save the result; fails if the
    /// folded network does not reproduce the original.
    Collapse {
        /// Model file to fold.
        #[arg(long)]
        model: PathBuf,
        /// Where to write the folded model (default: collapsed.sbm next to
        /// the input).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
    /// Write variance, cosine, activation, all-off, and ensemble reports
    /// for a saved model.
    Diagnose {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model file to inspect.
        #[arg(long)]
        model: PathBuf,
    },
    /// Run the built-in property checks (exhaustive enumeration against the
    /// folded layer, reduction identities, gradients, round trips).
    Verify {
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
}

fn load_config(args: &ConfigArgs) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Train { cfg } => {
            let cfg = load_config(cfg)?;
            commands::cmd_train(&cfg)
        }
        Command::Eval { cfg, model } => {
            let cfg = load_config(cfg)?;
            commands::cmd_eval(model, &cfg)
        }
        Command::Collapse { model, out, fault } => {
            let out = out.clone().unwrap_or_else(|| {
                model.parent().unwrap_or_else(|| std::path::Path::new(".")).join("collapsed.sbm")
            });
            commands::cmd_collapse(model, &out, fault.as_deref())
        }
        Command::Diagnose { cfg: args, model } => {
            let cfg = load_config(args)?;
            let out_dir = match &args.out {
                Some(dir) => dir.clone(),
                None => cfg.output_dir.join("diagnostics"),
            };
            commands::cmd_diagnose(model, &cfg, &out_dir)
        }
        Command::Verify { fault } => commands::cmd_verify(fault.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
