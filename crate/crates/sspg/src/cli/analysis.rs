//! Analysis subcommands: convergence traces, the goal-quantized transition
//! matrix of the learned kernel, and the steady-state histogram against
//! canonical-distribution oracles.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::Serialize;

use crate::agent::Checkpoint;
use crate::btpolicy::gaussian_noise;
use crate::cli::{build_agent, build_env};
use crate::config::RunConfig;
use crate::diffcore::Mat;
use crate::envs::{oracle, Environment};
use crate::error::{Result, SspgError};
use crate::rng::RngStreams;

pub const PSRF_TRACE_HEADER: &str = "step,N,R_p,lambda_max";

/// Roll evaluation episodes and dump every scale-reduction evaluation the
/// agent made, one CSV row per (episode, N) pair.
pub fn cmd_psrf_trace(cfg: &RunConfig, checkpoint: &Path, episodes: usize, out: &Path) -> Result<usize> {
    let mut env = build_env(cfg)?;
    let mut streams = RngStreams::from_seed(cfg.run.seed);
    let mut agent = build_agent(cfg, env.as_ref(), &mut streams)?;
    Checkpoint::load(checkpoint)?.apply_to(&mut agent)?;

    let mut w = BufWriter::new(File::create(out)?);
    writeln!(w, "{PSRF_TRACE_HEADER}")?;
    let mut rows = 0usize;
    for episode in 1..=episodes {
        let mut state = env.reset(&mut streams.eval);
        loop {
            let (action, stats) = agent.act(&state, &mut streams)?;
            for p in &stats.trace {
                writeln!(w, "{},{},{},{}", episode, p.n, p.r_p, p.lambda_max)?;
                rows += 1;
            }
            let outcome = env.step(&action)?;
            if outcome.done {
                break;
            }
            state = outcome.next_state;
        }
    }
    w.flush()?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct TransitionMatrixReport {
    /// Row g: distribution over nearest goals after one kernel step from
    /// beliefs sampled around goal g.
    pub matrix: Vec<Vec<f64>>,
    /// Rows with no valid samples are flagged undefined.
    pub defined: Vec<bool>,
}

impl TransitionMatrixReport {
    /// Index of the dominant successor per row, when defined.
    pub fn successors(&self) -> Vec<Option<usize>> {
        self.matrix
            .iter()
            .zip(&self.defined)
            .map(|(row, &ok)| {
                if !ok {
                    return None;
                }
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                    .map(|(i, _)| i)
            })
            .collect()
    }
}

fn sample_in_ball(goal: &[f64], radius: f64, rng: &mut impl Rng) -> Option<Vec<f64>> {
    // Rejection from the enclosing cube-intersected box.
    for _ in 0..256 {
        let candidate: Vec<f64> = goal
            .iter()
            .map(|&g| rng.random_range((g - radius).max(-0.999_999)..(g + radius).min(0.999_999)))
            .collect();
        let dist = candidate
            .iter()
            .zip(goal.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if dist <= radius {
            return Some(candidate);
        }
    }
    None
}

/// Goal-quantized one-step transition matrix of the learned kernel: sample
/// beliefs within the radius of each goal, apply one stochastic reasoning
/// step at the environment's token state, and assign the outputs to their
/// nearest goals.
pub fn quantized_transition_matrix(
    agent: &crate::agent::SspgAgent,
    env: &dyn Environment,
    samples_per_goal: usize,
    rng: &mut impl Rng,
) -> Result<TransitionMatrixReport> {
    let goals = env
        .goals()
        .ok_or_else(|| SspgError::Config(format!("{}: environment exposes no goals", env.name())))?;
    if goals.len() < 2 {
        return Err(SspgError::Config(
            "transition-matrix analysis needs at least 2 goals".into(),
        ));
    }
    let radius = env.goal_radius().unwrap_or(0.35);
    let state = vec![0.0; env.state_dim()];
    let dim = env.action_dim();
    let g = goals.len();

    let mut matrix = vec![vec![0.0; g]; g];
    let mut defined = vec![false; g];
    for (gi, goal) in goals.iter().enumerate() {
        let mut rows = Vec::with_capacity(samples_per_goal);
        for _ in 0..samples_per_goal {
            if let Some(p) = sample_in_ball(goal, radius, rng) {
                rows.push(p);
            }
        }
        if rows.is_empty() {
            eprintln!("warning: no belief samples land within {radius} of goal {gi}; row undefined");
            continue;
        }
        let beliefs = Mat::from_rows(&rows);
        let eps = gaussian_noise(beliefs.rows(), dim, rng);
        let stepped = agent.policy.transition_values(&state, &beliefs, &eps)?;

        let mut counts = vec![0usize; g];
        for r in 0..stepped.rows() {
            let out = stepped.row(r);
            let (mut best, mut dist) = (0usize, f64::INFINITY);
            for (gj, other) in goals.iter().enumerate() {
                let d = other
                    .iter()
                    .zip(out.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if d < dist {
                    best = gj;
                    dist = d;
                }
            }
            counts[best] += 1;
        }
        let total = rows.len() as f64;
        for (gj, &c) in counts.iter().enumerate() {
            matrix[gi][gj] = c as f64 / total;
        }
        defined[gi] = true;
    }
    Ok(TransitionMatrixReport { matrix, defined })
}

pub fn cmd_transition_matrix(
    cfg: &RunConfig,
    checkpoint: &Path,
    samples_per_goal: usize,
    out: &Path,
) -> Result<TransitionMatrixReport> {
    let env = build_env(cfg)?;
    let mut streams = RngStreams::from_seed(cfg.run.seed);
    let mut agent = build_agent(cfg, env.as_ref(), &mut streams)?;
    Checkpoint::load(checkpoint)?.apply_to(&mut agent)?;

    let report = quantized_transition_matrix(&agent, env.as_ref(), samples_per_goal, &mut streams.eval)?;

    let mut w = BufWriter::new(File::create(out)?);
    let g = report.matrix.len();
    let header: Vec<String> = (0..g).map(|j| format!("to_goal{j}")).collect();
    writeln!(w, "from,{},defined", header.join(","))?;
    for (i, row) in report.matrix.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{},{},{}", i, cells.join(","), report.defined[i])?;
    }
    w.flush()?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct SsHistReport {
    pub bins: usize,
    pub samples: usize,
    /// Distance to the canonical distribution of the ground-truth reward.
    pub tv_reward_canonical: f64,
    /// Distance to the canonical distribution of the learned critic.
    pub tv_critic_canonical: f64,
}

/// Histogram the steady-state behavior of a 1-D agent and compare it with
/// canonical distributions `exp(Q/alpha)` built from the ground-truth
/// reward and from the learned critic.
pub fn cmd_ss_hist(
    cfg: &RunConfig,
    checkpoint: &Path,
    bins: usize,
    samples: usize,
    out: Option<&Path>,
) -> Result<SsHistReport> {
    let mut env = build_env(cfg)?;
    if env.action_dim() != 1 {
        return Err(SspgError::Config(format!(
            "ss-hist needs a 1-D action space, {} has {}",
            env.name(),
            env.action_dim()
        )));
    }
    let mut streams = RngStreams::from_seed(cfg.run.seed);
    let mut agent = build_agent(cfg, env.as_ref(), &mut streams)?;
    Checkpoint::load(checkpoint)?.apply_to(&mut agent)?;

    let state = env.reset(&mut streams.eval);
    let draws = agent.steady_state_samples(&state, samples, &mut streams)?;
    let xs: Vec<f64> = draws.iter().map(|a| a[0]).collect();
    let empirical = oracle::histogram(&xs, bins, -1.0, 1.0);

    let alpha = agent.temperature.alpha();
    if !(alpha > 0.0) {
        return Err(SspgError::Config(
            "ss-hist needs a positive temperature to define the canonical distribution".into(),
        ));
    }
    let canon = oracle::CanonicalOracle::new(4001, alpha)?;
    let reward_fn = |a: f64| env.reward_at(&[a]).expect("single-step environment has ground-truth reward");
    let reward_masses = canon.bin_masses(&reward_fn, bins);
    let token = state.clone();
    let critics = &agent.critics;
    let critic_fn = move |a: f64| {
        let s = Mat::from_vec(1, token.len(), token.clone());
        let (_, agg) = critics.q_eval(&s, &Mat::scalar(a), false).expect("critic eval");
        agg[0]
    };
    let critic_masses = canon.bin_masses(&critic_fn, bins);

    let report = SsHistReport {
        bins,
        samples: xs.len(),
        tv_reward_canonical: oracle::tv_distance(&empirical, &reward_masses),
        tv_critic_canonical: oracle::tv_distance(&empirical, &critic_masses),
    };

    if let Some(path) = out {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "bin_center,empirical,canonical_reward,canonical_critic")?;
        for b in 0..bins {
            let center = -1.0 + (b as f64 + 0.5) * 2.0 / bins as f64;
            writeln!(w, "{},{},{},{}", center, empirical[b], reward_masses[b], critic_masses[b])?;
        }
        writeln!(w, "# tv_reward_canonical = {}", report.tv_reward_canonical)?;
        writeln!(w, "# tv_critic_canonical = {}", report.tv_critic_canonical)?;
        w.flush()?;
    }
    Ok(report)
}
