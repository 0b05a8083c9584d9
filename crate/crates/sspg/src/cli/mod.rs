//! Command implementations behind the binary: training, evaluation, and
//! the analysis subcommands. Everything here is a plain function over the
//! parsed [`RunConfig`], so integration tests drive the exact code the CLI
//! runs.

pub mod analysis;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::agent::{Checkpoint, SspgAgent, Transition};
use crate::config::RunConfig;
use crate::envs::{oracle, EnvRegistry, Environment};
use crate::error::{Result, SspgError};
use crate::rng::RngStreams;

pub const METRICS_HEADER: &str = "step,policy_loss,critic_loss,alpha,N_hat,mean_R_p";
pub const ACTING_HEADER: &str = "step,reward,n_used,n_simulated,converged,r_p,random_phase";

pub struct TrainArtifacts {
    pub out_dir: PathBuf,
    pub resolved_config: PathBuf,
    pub metrics: PathBuf,
    pub acting: PathBuf,
    pub checkpoint: PathBuf,
    pub learn_rows: usize,
}

/// Resolve derived agent fields that depend on the environment, so the
/// echoed config is fully explicit.
fn resolve_config(cfg: &RunConfig) -> RunConfig {
    let mut resolved = cfg.clone();
    resolved.agent.penalty_beta = Some(cfg.agent.effective_beta());
    resolved
}

pub fn build_env(cfg: &RunConfig) -> Result<Box<dyn Environment>> {
    EnvRegistry::with_defaults().build(&cfg.environment)
}

pub fn build_agent(cfg: &RunConfig, env: &dyn Environment, streams: &mut RngStreams) -> Result<SspgAgent> {
    SspgAgent::new(cfg.agent.clone(), env.state_dim(), env.action_dim(), &mut streams.init)
}

/// Train per the config, writing the resolved config echo, per-step acting
/// rows, per-learn-step loss rows, and periodic plus final checkpoints.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainArtifacts> {
    std::fs::create_dir_all(out_dir)?;
    let resolved_path = out_dir.join("config.resolved.toml");
    std::fs::write(&resolved_path, resolve_config(cfg).to_resolved_toml()?)?;

    let mut env = build_env(cfg)?;
    let mut streams = RngStreams::from_seed(cfg.run.seed);
    let mut agent = build_agent(cfg, env.as_ref(), &mut streams)?;

    let metrics_path = out_dir.join("metrics.csv");
    let acting_path = out_dir.join("acting.csv");
    let ckpt_path = out_dir.join("checkpoint.json");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    let mut acting = BufWriter::new(File::create(&acting_path)?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    writeln!(acting, "{ACTING_HEADER}")?;

    let mut state = env.reset(&mut streams.env);
    let mut learn_rows = 0usize;
    for step in 1..=cfg.run.total_steps {
        let (action, stats) = agent.act(&state, &mut streams)?;
        let outcome = env.step(&action)?;
        agent.record_transition(Transition {
            state: state.clone(),
            action,
            reward: outcome.reward,
            next_state: outcome.next_state.clone(),
            done: outcome.done,
        });
        writeln!(
            acting,
            "{},{},{},{},{},{},{}",
            step,
            outcome.reward,
            stats.n_used,
            stats.n_simulated,
            stats.converged,
            stats.final_r_p().unwrap_or(f64::NAN),
            stats.random_phase
        )?;
        state = if outcome.done { env.reset(&mut streams.env) } else { outcome.next_state };

        if agent.ready_to_learn() {
            let report = agent.learn_step(&mut streams)?;
            writeln!(
                metrics,
                "{},{},{},{},{},{}",
                report.step, report.policy_loss, report.critic_loss, report.alpha, report.n_hat, report.mean_r_p
            )?;
            learn_rows += 1;
        }
        metrics.flush()?;
        acting.flush()?;

        if cfg.run.checkpoint_every > 0 && step % cfg.run.checkpoint_every == 0 {
            Checkpoint::from_agent(&agent).save(&ckpt_path)?;
        }
    }
    Checkpoint::from_agent(&agent).save(&ckpt_path)?;

    Ok(TrainArtifacts {
        out_dir: out_dir.to_path_buf(),
        resolved_config: resolved_path,
        metrics: metrics_path,
        acting: acting_path,
        checkpoint: ckpt_path,
        learn_rows,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean_return: Option<f64>,
    pub return_std: Option<f64>,
    pub goal_frequencies: Option<Vec<f64>>,
    pub out_of_radius: Option<f64>,
    pub n_mean: Option<f64>,
    pub n_median: Option<usize>,
    pub n_max: Option<usize>,
    /// How often each converged length occurred.
    pub n_counts: BTreeMap<usize, usize>,
    pub converged_fraction: Option<f64>,
    pub mean_final_r_p: Option<f64>,
}

/// Restore the checkpointed agent and roll episodes with the acting path.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, episodes: usize, out: Option<&Path>) -> Result<EvalReport> {
    let mut env = build_env(cfg)?;
    let mut streams = RngStreams::from_seed(cfg.run.seed);
    let mut agent = build_agent(cfg, env.as_ref(), &mut streams)?;
    Checkpoint::load(checkpoint)?.apply_to(&mut agent)?;

    let mut returns = Vec::with_capacity(episodes);
    let mut actions = Vec::with_capacity(episodes);
    let mut n_used = Vec::with_capacity(episodes);
    let mut final_rps = Vec::new();
    let mut converged = 0usize;
    let mut reasoned = 0usize;
    for _ in 0..episodes {
        let mut state = env.reset(&mut streams.eval);
        let mut episode_return = 0.0;
        loop {
            let (action, stats) = agent.act(&state, &mut streams)?;
            let outcome = env.step(&action)?;
            episode_return += outcome.reward;
            actions.push(action);
            if !stats.random_phase {
                reasoned += 1;
                n_used.push(stats.n_used);
                if stats.converged {
                    converged += 1;
                }
                if let Some(r) = stats.final_r_p() {
                    final_rps.push(r);
                }
            }
            if outcome.done {
                break;
            }
            state = outcome.next_state;
        }
        returns.push(episode_return);
    }

    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let mut n_counts = BTreeMap::new();
    for &n in &n_used {
        *n_counts.entry(n).or_insert(0usize) += 1;
    }
    let mut n_sorted = n_used.clone();
    n_sorted.sort_unstable();

    let goal_stats = env
        .goals()
        .map(|goals| oracle::goal_visit_frequencies(&actions, goals, env.goal_radius().unwrap_or(0.35)))
        .filter(|_| !actions.is_empty());

    let report = EvalReport {
        episodes,
        mean_return: (!returns.is_empty()).then(|| mean(&returns)),
        return_std: (returns.len() > 1).then(|| {
            let m = mean(&returns);
            (returns.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (returns.len() - 1) as f64).sqrt()
        }),
        goal_frequencies: goal_stats.as_ref().map(|(f, _)| f.clone()),
        out_of_radius: goal_stats.as_ref().map(|(_, o)| *o),
        n_mean: (!n_used.is_empty()).then(|| n_used.iter().sum::<usize>() as f64 / n_used.len() as f64),
        n_median: (!n_sorted.is_empty()).then(|| n_sorted[n_sorted.len() / 2]),
        n_max: n_sorted.last().copied(),
        n_counts,
        converged_fraction: (reasoned > 0).then(|| converged as f64 / reasoned as f64),
        mean_final_r_p: (!final_rps.is_empty()).then(|| mean(&final_rps)),
    };

    if let Some(path) = out {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| SspgError::Checkpoint(format!("report serialize failed: {e}")))?;
        std::fs::write(path, json)?;
    }
    Ok(report)
}
