use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use saccader::config::RunConfig;
use saccader::pipeline::{Command, Run};
use saccader::Error;

#[derive(Parser)]
#[command(name = "saccader", version, about = "Hard attention image classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Configuration file (`key = value` lines, `#` comments).
    #[arg(long, short, global = true, default_value = "saccader.conf")]
    config: PathBuf,

    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory holding run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Generate the synthetic dataset.
    GenData,
    /// Train the representation network.
    TrainRep,
    /// Pretrain the location network with teacher forcing.
    PretrainLoc,
    /// Train both networks jointly with policy gradients.
    TrainJoint,
    /// Accuracy and coverage of every policy per glimpse count.
    Eval,
    /// Like `eval`, plus occlusion analysis with a full-image classifier.
    OccludeEval,
    /// PGD attack on the jointly trained model.
    Attack,
    /// Export per-image glimpse sequences.
    EmitTraces,
    /// Print every configuration key with its default.
    ShowConfig,
}

fn command(c: Cmd) -> Option<Command> {
    Some(match c {
        Cmd::GenData => Command::GenData,
        Cmd::TrainRep => Command::TrainRep,
        Cmd::PretrainLoc => Command::PretrainLoc,
        Cmd::TrainJoint => Command::TrainJoint,
        Cmd::Eval => Command::Eval,
        Cmd::OccludeEval => Command::OccludeEval,
        Cmd::Attack => Command::Attack,
        Cmd::EmitTraces => Command::EmitTraces,
        Cmd::ShowConfig => return None,
    })
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(&cli.config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", cli.config.display())))?;
    let mut cfg = RunConfig::parse(&text).with_context(|| format!("in {}", cli.config.display()))?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let Some(cmd) = command(cli.command) else {
        print!("{}", RunConfig::default().to_text());
        return Ok(());
    };
    let cfg = load_config(&cli)?;
    let dir = Run::open(&cli.out, cfg)?
        .execute(cmd)
        .with_context(|| format!("`{}` failed", cmd.name()))?;
    println!("{}", dir.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::MissingCheckpoint { .. }) => 3,
        Some(Error::NonFinite(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
