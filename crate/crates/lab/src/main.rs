use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use simt_lab::config::Settings;
use simt_lab::error::{LabError, LabResult};
use simt_lab::pipeline::{run, Command};

/// Simultaneous translation experiments: data, environment pretraining,
/// agent training, evaluation and reports.
#[derive(Parser)]
#[command(name = "simt", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Args)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; one run at a time.
    #[arg(long)]
    out: PathBuf,
    /// RL runs with seeds seed, seed+1, ...
    #[arg(long)]
    replicas: Option<usize>,
    /// Overrides a configuration key, e.g. --set lr=0.001.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Sub {
    /// Writes a synthetic corpus and, with oracle features, feature files.
    MakeData(Common),
    /// Trains the translation environment on full sentences.
    Pretrain(Common),
    /// Trains READ/WRITE agents against a frozen environment.
    RlTrain(Common),
    /// Scores a policy on a split and writes transcripts and a report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Transcript log of a system to test against.
        #[arg(long)]
        against: Option<PathBuf>,
    },
    /// Lag histograms, attention norms and action traces from transcript logs.
    Report {
        #[command(flatten)]
        common: Common,
        /// Fail unless every log carries attention weights.
        #[arg(long)]
        attention: bool,
        #[arg(required = true)]
        logs: Vec<PathBuf>,
    },
    /// Paired bootstrap test: does system B improve on system A?
    Compare {
        #[command(flatten)]
        common: Common,
        a: PathBuf,
        b: PathBuf,
    },
}

fn settings(c: &Common) -> LabResult<Settings> {
    let mut s = match &c.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
            Settings::from_text(&text)?
        }
        None => Settings::default(),
    };
    if let Some(seed) = c.seed {
        s.set("seed", &seed.to_string())?;
    }
    if let Some(r) = c.replicas {
        s.set("replicas", &r.to_string())?;
    }
    for a in &c.set {
        s.apply(a)?;
    }
    Ok(s)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (common, command) = match cli.command {
        Sub::MakeData(c) => (c, Command::MakeData),
        Sub::Pretrain(c) => (c, Command::Pretrain),
        Sub::RlTrain(c) => (c, Command::RlTrain),
        Sub::Evaluate { common, against } => (common, Command::Evaluate { against }),
        Sub::Report { common, attention, logs } => (common, Command::Report { logs, attention }),
        Sub::Compare { common, a, b } => (common, Command::Compare { a, b }),
    };
    let result = settings(&common).and_then(|s| s.resolve()).and_then(|cfg| run(&command, &cfg, &common.out));
    match result {
        Ok(m) => {
            println!("{}", serde_json::to_string_pretty(&m.metrics).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("simt {}: {e}", command.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
