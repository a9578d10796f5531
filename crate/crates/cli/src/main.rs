use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use sigdraw::experiment::{run_experiment, RunConfig, Stage};

#[derive(Parser)]
#[command(name = "sigdraw", about = "Signaling-to-GPS drawing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults are used for anything missing.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    GenWorld(Common),
    GenData(Common),
    Pair(Common),
    Render(Common),
    TrainSft(Common),
    TrainRl(Common),
    Baseline(Common),
    Eval(Common),
    Report(Common),
    /// Runs several stages in pipeline order.
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma-separated stage names, or `all`.
        #[arg(long, default_value = "all")]
        stages: String,
    },
    /// Prints the fully resolved configuration.
    ShowConfig {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load(config: &Option<PathBuf>, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let (common, stages) = match cli.command {
        Command::ShowConfig { config } => {
            print!("{}", load(&config, None)?.to_toml());
            return Ok(());
        }
        Command::Run { common, stages } => (common, Stage::parse_list(&stages)?),
        Command::GenWorld(c) => (c, vec![Stage::GenWorld]),
        Command::GenData(c) => (c, vec![Stage::GenData]),
        Command::Pair(c) => (c, vec![Stage::Pair]),
        Command::Render(c) => (c, vec![Stage::Render]),
        Command::TrainSft(c) => (c, vec![Stage::TrainSft]),
        Command::TrainRl(c) => (c, vec![Stage::TrainRl]),
        Command::Baseline(c) => (c, vec![Stage::Baseline]),
        Command::Eval(c) => (c, vec![Stage::Eval]),
        Command::Report(c) => (c, vec![Stage::Report]),
    };
    let cfg = load(&common.config, common.seed)?;
    let manifest = run_experiment(&cfg, &common.out, &stages)?;
    println!("{} config_hash={} stages={}", common.out.display(), manifest.config_hash, manifest.stages().join(","));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
