use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sspg::cli;
use sspg::config::RunConfig;
use sspg::error::{Result, SspgError};

#[derive(Parser)]
#[command(name = "sspg", version, about = "Steady-state reasoning agent: train, evaluate, analyze")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and write run artifacts.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (defaults to run.out_dir from the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Roll evaluation episodes from a checkpoint and report statistics.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Episodes to roll (defaults to run.eval_episodes).
        #[arg(long)]
        episodes: Option<usize>,
        /// Write the JSON report here as well as stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Diagnostics over a trained checkpoint.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// CSV of every scale-reduction evaluation across eval episodes.
    PsrfTrace {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Goal-quantized one-step transition matrix of the learned kernel.
    TransitionMatrix {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Belief samples per goal.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Steady-state histogram vs canonical-distribution oracles (1-D).
    SsHist {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 64)]
        bins: usize,
        #[arg(long, default_value_t = 8192)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, out } => {
            let cfg = config.load()?;
            let out_dir = out
                .or_else(|| cfg.run.out_dir.clone())
                .ok_or_else(|| SspgError::Config("no output directory: set run.out_dir or pass --out".into()))?;
            let artifacts = cli::cmd_train(&cfg, &out_dir)?;
            println!(
                "trained {} steps ({} learn rows); artifacts in {}",
                cfg.run.total_steps,
                artifacts.learn_rows,
                artifacts.out_dir.display()
            );
        }
        Command::Eval {
            config,
            checkpoint,
            episodes,
            out,
        } => {
            let cfg = config.load()?;
            let episodes = episodes.unwrap_or(cfg.run.eval_episodes);
            let report = cli::cmd_eval(&cfg, &checkpoint, episodes, out.as_deref())?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            );
        }
        Command::Analyze { what } => match what {
            AnalyzeCommand::PsrfTrace {
                config,
                checkpoint,
                episodes,
                out,
            } => {
                let cfg = config.load()?;
                let episodes = episodes.unwrap_or(cfg.run.eval_episodes);
                let rows = cli::analysis::cmd_psrf_trace(&cfg, &checkpoint, episodes, &out)?;
                println!("wrote {rows} trace rows to {}", out.display());
            }
            AnalyzeCommand::TransitionMatrix {
                config,
                checkpoint,
                samples,
                out,
            } => {
                let cfg = config.load()?;
                let report = cli::analysis::cmd_transition_matrix(&cfg, &checkpoint, samples, &out)?;
                println!(
                    "{}",
                    serde_json::to_string_pretty(&report).expect("report serializes")
                );
            }
            AnalyzeCommand::SsHist {
                config,
                checkpoint,
                bins,
                samples,
                out,
            } => {
                let cfg = config.load()?;
                let report = cli::analysis::cmd_ss_hist(&cfg, &checkpoint, bins, samples, out.as_deref())?;
                println!(
                    "{}",
                    serde_json::to_string_pretty(&report).expect("report serializes")
                );
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
