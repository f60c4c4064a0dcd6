use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use xteach::config::ExperimentConfig;
use xteach::pipeline;

/// Registration-guided cross-teaching on synthetic phantom volumes.
#[derive(Parser, Debug)]
#[command(name = "xteach", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment file (JSON). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Root directory of every artifact.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override a config value by dotted path, e.g. `train.flags.rsl=true`.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    overrides: Vec<String>,
    /// Print the resolved configuration before running.
    #[arg(long, global = true)]
    show_config: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize the phantom cohort and its oracle labels.
    Generate,
    /// Register every ordered pair of training volumes.
    Register {
        /// Similarity metric (`mi` or `neg_rmse`).
        #[arg(long)]
        metric: Option<String>,
    },
    /// Select sources and propagate labels onto unlabeled volumes.
    PrepareRsl,
    /// Train the two networks.
    Train {
        /// Continue from the run's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Score a run and the registration-only baseline on the test cases.
    Eval {
        /// Run directory; defaults to the one named by the config flags and seed.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Train and evaluate every configured flag set and seed, then tabulate.
    Ablate,
}

fn resolve(common: &Common, extra: &[String]) -> anyhow::Result<ExperimentConfig> {
    let base = match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    let mut overrides = common.overrides.clone();
    overrides.extend_from_slice(extra);
    let mut cfg = base.with_overrides(&overrides)?;
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn print<T: serde::Serialize>(v: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut extra = Vec::new();
    if let Command::Register { metric: Some(m) } = &cli.command {
        extra.push(format!("registration.metric={m}"));
    }
    let cfg = resolve(&cli.common, &extra)?;
    if cli.common.show_config {
        eprintln!("{}", serde_json::to_string_pretty(&cfg)?);
    }
    match cli.command {
        Command::Generate => print(&pipeline::cmd_generate(&cfg)?),
        Command::Register { .. } => print(&pipeline::cmd_register(&cfg)?),
        Command::PrepareRsl => print(&pipeline::cmd_prepare_rsl(&cfg)?),
        Command::Train { resume } => print(&pipeline::cmd_train(&cfg, resume)?),
        Command::Eval { run } => print(&pipeline::cmd_eval(&cfg, run.as_deref())?),
        Command::Ablate => print(&pipeline::cmd_ablate(&cfg)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
