use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dpn::cli;
use dpn::trainer::TrainConfig;

#[derive(Parser)]
#[command(name = "dpn", version, about = "Train, evaluate and inspect dynamic planning networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat TOML config; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// `key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "K=V")]
    overrides: Vec<String>,
    /// Single-threaded, bit-reproducible collection and updates.
    #[arg(long)]
    sequential: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> dpn::Result<TrainConfig> {
        cli::resolve_config(self.config.as_deref(), self.seed, self.sequential, &self.overrides)
    }

    /// Only when the user asked for a config; otherwise the checkpoint's own.
    fn resolve_optional(&self) -> dpn::Result<Option<TrainConfig>> {
        if self.config.is_some() || !self.overrides.is_empty() {
            self.resolve().map(Some)
        } else {
            Ok(None)
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the planning network or the A2C baseline.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
        /// Continue from a checkpoint; overrides apply on top of its config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Mean and spread of episode reward for a checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long)]
        greedy: bool,
    },
    /// Write the plans of a planning checkpoint as JSON lines.
    Trace {
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "traces.jsonl")]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long)]
        greedy: bool,
    },
    /// Count breadth-first, depth-first and mixed plans in a trace file.
    Patterns {
        traces: PathBuf,
        /// Also write the counts as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare state-transition counts of the planning schemes.
    Bench {
        #[arg(long, default_value_t = 4)]
        actions: u64,
        #[arg(long, default_value_t = 3)]
        depth: u64,
        #[arg(short = 'T', long = "horizon", default_value_t = 3)]
        horizon: u64,
        #[arg(long = "rollout-length", default_value_t = 3)]
        rollout_length: u64,
    },
    /// Smoothed training curves as CSV and SVG, one pair per environment.
    Plot {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        window: usize,
    },
}

fn run(command: Command) -> dpn::Result<bool> {
    match command {
        Command::Train { cfg, out, resume } => {
            let config = cfg.resolve()?;
            let s = cli::run_train(config, &out, resume.as_deref(), &cfg.overrides)?;
            println!(
                "iterations {}  env steps {}  episodes {}  last-100 {}  last-1000 {}",
                s.iterations,
                s.env_steps,
                s.episodes,
                fmt_opt(s.mean_reward_100),
                fmt_opt(s.mean_reward_1000)
            );
            println!("metrics {}\ncheckpoint {}", s.metrics.display(), s.checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            cfg,
            episodes,
            greedy,
        } => {
            let summary = cli::run_eval(&checkpoint, cfg.resolve_optional()?, episodes, greedy, cfg.seed.unwrap_or(0))?;
            println!("{summary}");
        }
        Command::Trace {
            checkpoint,
            cfg,
            out,
            episodes,
            greedy,
        } => {
            let n = cli::run_trace(&checkpoint, cfg.resolve_optional()?, episodes, greedy, cfg.seed.unwrap_or(0), &out)?;
            println!("{n} traces written to {}", out.display());
        }
        Command::Patterns { traces, out } => {
            let report = cli::run_patterns(&traces)?;
            println!("{report}");
            if let Some(p) = out {
                let json = serde_json::to_string_pretty(&report).expect("report serializes");
                std::fs::write(&p, json).map_err(|e| dpn::Error::io(&p, e))?;
            }
            return Ok(report.rejected.is_empty());
        }
        Command::Bench {
            actions,
            depth,
            horizon,
            rollout_length,
        } => println!("{}", cli::run_bench(actions, depth, horizon, rollout_length)?),
        Command::Plot { metrics, out, window } => {
            let report = cli::run_plot(&metrics, &out, window)?;
            for p in report.csv.iter().chain(&report.images) {
                println!("wrote {}", p.display());
            }
            for w in &report.warnings {
                log::warn!("{w}");
            }
        }
    }
    Ok(true)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
