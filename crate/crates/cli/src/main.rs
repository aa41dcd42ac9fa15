use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use contraq_core::config::ExperimentConfig;
use contraq_core::harness;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Collect,
    TrainModel,
    TrainMetric,
    ValidateFilter,
    TrainAgent,
    Evaluate,
    Replay,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Collect => "collect",
            Command::TrainModel => "train-model",
            Command::TrainMetric => "train-metric",
            Command::ValidateFilter => "validate-filter",
            Command::TrainAgent => "train-agent",
            Command::Evaluate => "evaluate",
            Command::Replay => "replay",
        }
    }
}

/// Contraction-filtered gain tuning for a simulated hydraulic force loop.
#[derive(Debug, Parser)]
#[command(name = "contraq", version)]
struct Args {
    command: Command,
    /// TOML experiment config; omitted keys take their defaults.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = ExperimentConfig::load(&args.config).and_then(|mut cfg| {
        if let Some(s) = args.seed {
            cfg.seed = s;
        }
        harness::run(args.command.name(), &cfg, &args.out)
    });
    match result {
        Ok(m) => {
            println!("{}: {} artifacts in {}", m.command, m.artifacts.len(), args.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
