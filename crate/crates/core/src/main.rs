use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

use deepcuts::analysis::runs_csv;
use deepcuts::commands::{cmd_analyze, cmd_prune, cmd_report, cmd_run, cmd_score, cmd_train, RunOptions};
use deepcuts::config::RunConfig;
use deepcuts::strategies::StrategyKind;
use deepcuts::{Error, Result};

/// Single-shot pruning with saliency-derived importance scores.
#[derive(Parser)]
#[command(name = "deepcuts", version)]
struct Cli {
    /// More log output (-v stages, -vv everything).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set strategy.lambda=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(out) = &self.out {
            overrides.push(format!("out={}", out.display()));
        }
        RunConfig::load(&self.config, &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build and fine-tune the dense model for every configured seed.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score a fine-tuned checkpoint with one strategy.
    Score {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        strategy: String,
        /// Defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Fine-tuned checkpoint to score instead of the run's own.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Build a mask from a score file.
    Prune {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        ratio: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full sweep and write reports, tables and plot data.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Reuse checkpoints, scores and reports from an earlier run of the same config.
        #[arg(long)]
        resume: bool,
    },
    /// Compare masks pairwise and write IOU tables.
    Analyze {
        #[arg(required = true, num_args = 2..)]
        masks: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Config whose model spec defines the attention heads.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Rebuild aggregated tables from the reports under an output directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train { cfg, jobs } => {
            for path in cmd_train(&cfg.load()?, jobs)? {
                println!("{}", path.display());
            }
        }
        Command::Score {
            cfg,
            strategy,
            seed,
            checkpoint,
        } => {
            let config = cfg.load()?;
            let kind = StrategyKind::parse(&strategy)
                .ok_or_else(|| Error::Argument(format!("unknown strategy `{strategy}`")))?;
            let seed = seed.unwrap_or(config.seeds[0]);
            println!("{}", cmd_score(&config, kind, seed, checkpoint.as_deref())?.display());
        }
        Command::Prune { scores, ratio, out } => {
            if !(ratio.is_finite() && ratio >= 1.0) {
                return Err(Error::Argument(format!("compression ratio {ratio} must be >= 1")));
            }
            println!("{}", cmd_prune(&scores, ratio, &out)?.display());
        }
        Command::Run { cfg, jobs, resume } => {
            let config = cfg.load()?;
            let reports = cmd_run(&config, RunOptions { jobs, resume })?;
            print!("{}", runs_csv(&reports));
        }
        Command::Analyze { masks, out, config } => {
            let spec = config.map(|c| RunConfig::load(&c, &[])).transpose()?.map(|c| c.model);
            for c in cmd_analyze(&masks, spec.as_ref(), &out)? {
                println!(
                    "{} vs {}: mean IOU {:.4}, min IOU {:.4}",
                    c.strategy_a, c.strategy_b, c.result.mean_iou, c.result.min_iou
                );
            }
        }
        Command::Report { out } => {
            let (reports, _) = cmd_report(&out)?;
            print!("{}", runs_csv(&reports));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                // Stage errors already print their source inline.
                if !msg.contains(&s.to_string()) {
                    msg.push_str(&format!(": {s}"));
                }
                source = s.source();
            }
            eprintln!("error: {msg}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
