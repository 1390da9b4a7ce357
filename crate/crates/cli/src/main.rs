use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use refine_cli::config::{BackendKind, RunConfig};
use refine_cli::pipeline::{run_pipeline, Layout, PipelineError, Stage, StageStatus};

#[derive(Debug, Parser)]
#[command(name = "refine", version, about = "Advisor-guided policy refinement pipeline")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Advisor backend, overriding `advisor.backend`.
    #[arg(long, global = true)]
    backend: Option<BackendKind>,
    /// Output directory, overriding `paths.out_dir`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Run stages even when their stamps say they are up to date.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run several stages in canonical order.
    Run {
        /// Comma-separated stage names, or `all`.
        #[arg(long, default_value = "all")]
        stages: String,
    },
    /// Train the initial policy with plain PPO.
    Pretrain,
    /// Collect trajectories with the pretrained policy.
    Rollout,
    /// Ask the advisor for critical states and corrected actions.
    Identify,
    /// Ask the advisor for case analyses of failed episodes.
    Analyze,
    /// Fine-tune every configured method.
    Refine,
    /// Evaluate checkpoints.
    Eval,
    /// Write the CSV tables, plot and comparison.
    Report,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn load(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed_override {
        config.seeds = vec![seed];
    }
    if let Some(backend) = cli.backend {
        config.advisor.backend = backend;
    }
    if let Some(dir) = &cli.out_dir {
        config.paths.out_dir = dir.clone();
    }
    config.validate()?;
    Ok(config)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let config = load(cli)?;
    let stages = match &cli.command {
        Command::ShowConfig => {
            let text = toml::to_string_pretty(&config).map_err(|e| PipelineError::Other(e.to_string()))?;
            print!("{text}");
            return Ok(());
        }
        Command::Run { stages } => Stage::parse_list(stages)
            .map_err(|e| PipelineError::Config(refine_cli::config::ConfigError::Invalid(e)))?,
        Command::Pretrain => vec![Stage::Pretrain],
        Command::Rollout => vec![Stage::Rollout],
        Command::Identify => vec![Stage::Identify],
        Command::Analyze => vec![Stage::Analyze],
        Command::Refine => vec![Stage::Refine],
        Command::Eval => vec![Stage::Eval],
        Command::Report => vec![Stage::Report],
    };
    let outcomes = run_pipeline(&config, &stages, cli.force)?;
    for o in &outcomes {
        let what = match o.status {
            StageStatus::Ran => "done",
            StageStatus::Skipped => "up to date",
        };
        println!("{:<9} {what} ({:.1}s)", o.stage.name(), o.elapsed.as_secs_f64());
    }
    if stages.contains(&Stage::Report) {
        let table = Layout::new(&config.paths.out_dir).reports().join("comparison.txt");
        if let Ok(text) = std::fs::read_to_string(table) {
            print!("\n{text}");
        }
    }
    Ok(())
}
