//! The agent: acting by simulating the reasoning chain to convergence, and
//! learning with the truncated steady-state policy gradient.
//!
//! Acting keeps a batch of beliefs seeded from short-term memory, applies
//! the transition kernel until the scale-reduction diagnostic drops below
//! threshold (first checked at the running-mean length, then backtracked or
//! extended), and samples the action from the converged batch.
//!
//! Learning replays one reasoning chain per sampled transition with the
//! noise recorded on the tape. The first transition binds policy parameters
//! trainable and every later one binds frozen copies, so backpropagation
//! reproduces the product-of-step-Jacobians estimator: value terms at later
//! steps reach the parameters only through the differentiable belief path.
//! Critic parameters stay frozen inside the policy objective and vice
//! versa.

pub mod checkpoint;
pub mod memory;
pub mod temperature;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use memory::{ReplayBuffer, ShortTermActionMemory, Transition};
pub use temperature::{Temperature, TemperatureMode};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::btpolicy::{gaussian_noise, BeliefTransitionPolicy, ChainHistory, DensityPoint};
use crate::critic::SoftQEnsemble;
use crate::diffcore::{Binding, Mat, NodeId, Tape, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
use crate::error::{Result, SspgError};
use crate::grdiag::{psrf_at, update_running_steps, ConvergenceState, PsrfVariant};
use crate::rng::RngStreams;

/// How gradients are recorded along the learning chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChainGrad {
    /// Parameters trainable only at the first transition; later steps use
    /// frozen copies but keep the belief path differentiable.
    #[default]
    FirstStep,
    /// Experimental: every step records parameter gradients, while belief
    /// inputs are detached between steps.
    TruncatedFull,
}

/// Which state conditions the learning chain and its value terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyStateSource {
    /// Seed from the stored action at the successor state.
    #[default]
    Successor,
    /// Evaluate at the sampled state itself.
    Current,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    /// Parallel belief chains per action selection (M).
    pub initial_beliefs: usize,
    /// Short-term action memory size.
    pub memory_capacity: usize,
    /// Running-mean retention for converged chain lengths.
    pub rho: f64,
    /// Convergence rule: stop when the scale reduction drops below this.
    pub psrf_threshold: f64,
    /// Hard cap on reasoning steps per action selection.
    pub max_reasoning_steps: usize,
    pub initial_n_hat: f64,
    pub gamma: f64,
    pub polyak: f64,
    pub ensemble_size: usize,
    /// Aggregate spread penalty; unset means 0.75 for ensembles, 0 for a
    /// single critic.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub penalty_beta: Option<f64>,
    pub batch_size: usize,
    pub policy_lr: f64,
    pub critic_lr: f64,
    /// Uniform-random environment steps before reasoning starts.
    pub random_steps: usize,
    /// Transitions required before learning starts.
    pub min_data: usize,
    /// Critic updates per learn call (the first is fused with the policy
    /// update, the rest are critic-only).
    pub critic_utd: usize,
    pub replay_capacity: usize,
    pub hidden: Vec<usize>,
    pub alpha: f64,
    pub alpha_mode: TemperatureMode,
    /// Auto-mode target entropy; unset defaults to -action_dim.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_entropy: Option<f64>,
    pub alpha_lr: f64,
    pub log_sigma_min: f64,
    pub log_sigma_max: f64,
    /// Initial offset of the noise head's output bias.
    pub log_sigma_init: f64,
    /// Parallel learning chains per sampled transition.
    pub learn_chains: usize,
    /// Sample the executed action from the whole history rather than the
    /// final batch.
    pub sample_full_history: bool,
    pub chain_grad: ChainGrad,
    pub policy_state: PolicyStateSource,
    pub psrf_variant: PsrfVariant,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            initial_beliefs: 64,
            memory_capacity: 64,
            rho: 0.99,
            psrf_threshold: 1.1,
            max_reasoning_steps: 64,
            initial_n_hat: 2.0,
            gamma: 0.99,
            polyak: 0.995,
            ensemble_size: 1,
            penalty_beta: None,
            batch_size: 64,
            policy_lr: 3e-4,
            critic_lr: 3e-4,
            random_steps: 50,
            min_data: 64,
            critic_utd: 1,
            replay_capacity: 1_000_000,
            hidden: vec![32, 32],
            alpha: 0.2,
            alpha_mode: TemperatureMode::Fixed,
            target_entropy: None,
            alpha_lr: 1e-4,
            log_sigma_min: -5.0,
            log_sigma_max: 2.0,
            log_sigma_init: 0.0,
            learn_chains: 1,
            sample_full_history: false,
            chain_grad: ChainGrad::FirstStep,
            policy_state: PolicyStateSource::Successor,
            psrf_variant: PsrfVariant::Paper,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("initial_beliefs", self.initial_beliefs),
            ("memory_capacity", self.memory_capacity),
            ("max_reasoning_steps", self.max_reasoning_steps),
            ("ensemble_size", self.ensemble_size),
            ("batch_size", self.batch_size),
            ("critic_utd", self.critic_utd),
            ("replay_capacity", self.replay_capacity),
            ("learn_chains", self.learn_chains),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(SspgError::Config(format!("agent.{name} must be positive")));
            }
        }
        if self.initial_beliefs < 2 {
            return Err(SspgError::Config("agent.initial_beliefs must be at least 2".into()));
        }
        if !(self.psrf_threshold > 1.0) {
            return Err(SspgError::Config("agent.psrf_threshold must exceed 1".into()));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(SspgError::Config("agent.rho must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.polyak) {
            return Err(SspgError::Config("agent.polyak must lie in [0, 1)".into()));
        }
        if self.alpha < 0.0 {
            return Err(SspgError::Config("agent.alpha must be nonnegative".into()));
        }
        if !(self.initial_n_hat >= 1.0) {
            return Err(SspgError::Config("agent.initial_n_hat must be at least 1".into()));
        }
        Ok(())
    }

    pub fn effective_beta(&self) -> f64 {
        self.penalty_beta
            .unwrap_or(if self.ensemble_size >= 2 { 0.75 } else { 0.0 })
    }
}

/// Anything that can supply a per-row value estimate on the tape. The
/// critic ensemble is the production source; analytic surrogates slot in
/// for closed-form oracle checks.
pub trait QObjective {
    fn q_aggregate_on_tape(&self, tape: &mut Tape, s: NodeId, a: NodeId) -> Result<NodeId>;
}

impl QObjective for SoftQEnsemble {
    fn q_aggregate_on_tape(&self, tape: &mut Tape, s: NodeId, a: NodeId) -> Result<NodeId> {
        Ok(self.q_eval_on_tape(tape, s, a, false, Binding::Frozen)?.aggregate)
    }
}

/// Builder for the policy objective graph. `live` and `frozen` are the same
/// policy in production; gradient checks pin `frozen` while perturbing
/// `live`, matching how the estimator treats later chain steps as an
/// immutable copy of the kernel.
pub struct PolicyObjective<'a, Q: QObjective + ?Sized> {
    pub live: &'a BeliefTransitionPolicy,
    pub frozen: &'a BeliefTransitionPolicy,
    pub q: &'a Q,
    pub alpha: f64,
    pub chain_grad: ChainGrad,
    /// Parallel chains simulated per seed. The steady-state density mixes
    /// across sibling chains of the same seed, so with more than one chain
    /// it can see crowding across modes rather than only along one path.
    pub learn_chains: usize,
}

/// Handles into the built graph.
pub struct PolicyLossParts {
    pub loss: NodeId,
    /// Scalar roots, one per chain step: mean over the batch of the value
    /// term at that step. Used by the vanishing-gradient audit.
    pub q_term_roots: Vec<NodeId>,
    /// Belief nodes a_0..a_h.
    pub chain: Vec<NodeId>,
    /// Pre-squash nodes aligned with `chain`.
    pub pres: Vec<NodeId>,
    /// Per-step mixture log-density columns (present when alpha > 0).
    pub log_pi: Option<Vec<NodeId>>,
}

impl<Q: QObjective + ?Sized> PolicyObjective<'_, Q> {
    /// Record the reasoning chains and their objective on `tape`.
    ///
    /// `noise` holds one matrix per transition with `seeds.rows() * M` rows
    /// (M = `learn_chains`): each seed is replicated into M sibling chains
    /// laid out consecutively, and the chains run `noise.len()` steps,
    /// producing beliefs a_0..a_{noise.len()-1} per chain.
    pub fn build(&self, tape: &mut Tape, states: &Mat, seeds: &Mat, noise: &[Mat]) -> Result<PolicyLossParts> {
        if noise.is_empty() {
            return Err(SspgError::Contract("policy objective needs at least one transition".into()));
        }
        let m = self.learn_chains.max(1);
        let rows = seeds.rows() * m;
        if noise[0].rows() != rows {
            return Err(SspgError::dimension(
                "policy objective noise",
                format!("{rows} rows"),
                format!("{}", noise[0].rows()),
            ));
        }
        let s = tape.constant(states.repeat_rows(m));
        let seed_node = tape.constant(seeds.repeat_rows(m));
        let mut prev = seed_node;
        let mut chain = Vec::with_capacity(noise.len());
        let mut pres = Vec::with_capacity(noise.len());
        for (n, eps) in noise.iter().enumerate() {
            let (policy, binding) = match self.chain_grad {
                ChainGrad::FirstStep => {
                    if n == 0 {
                        (self.live, Binding::Trainable)
                    } else {
                        (self.frozen, Binding::Frozen)
                    }
                }
                ChainGrad::TruncatedFull => (self.live, Binding::Trainable),
            };
            if self.chain_grad == ChainGrad::TruncatedFull && n > 0 {
                prev = tape.stop_grad(prev);
            }
            let step = policy.transition_on_tape(tape, s, prev, eps, binding)?;
            prev = step.squashed;
            chain.push(step.squashed);
            pres.push(step.pre);
        }

        let mut q_term_roots = Vec::with_capacity(chain.len());
        let mut objective: Option<NodeId> = None;
        for &a_n in &chain {
            let q_col = self.q.q_aggregate_on_tape(tape, s, a_n)?;
            q_term_roots.push(tape.mean_all(q_col));
            objective = Some(match objective {
                None => q_col,
                Some(acc) => tape.add(acc, q_col)?,
            });
        }

        let log_pi = if self.alpha > 0.0 {
            // Conditioning covers the seed plus every belief of every
            // sibling chain of the same seed. The seed keeps each belief's
            // generating kernel represented (without it the first belief's
            // estimated density is unbounded below and the optimizer fakes
            // entropy with it); the siblings let the estimate see crowding
            // across modes.
            let mut conditioning = Vec::with_capacity(chain.len() + 1);
            conditioning.push(seed_node);
            conditioning.extend_from_slice(&chain);
            let mut heads = Vec::with_capacity(conditioning.len() * m);
            for &cond in &conditioning {
                let (mu, ls) = self.live.heads_on_tape(tape, s, cond, Binding::Trainable)?;
                heads.push((mu, ls));
                for offset in 1..m {
                    // Sibling view: row b*m + i reads chain (i+offset) mod m
                    // of the same seed b. Head values are reused, not
                    // recomputed.
                    let perm: Vec<usize> = (0..rows)
                        .map(|r| (r / m) * m + (r % m + offset) % m)
                        .collect();
                    let mu_g = tape.gather_rows(mu, perm.clone())?;
                    let ls_g = tape.gather_rows(ls, perm)?;
                    heads.push((mu_g, ls_g));
                }
            }
            let mut cols = Vec::with_capacity(chain.len());
            for &pre_n in &pres {
                let lp = self
                    .live
                    .mixture_log_density_from_heads(tape, &heads, DensityPoint::PreSquash(pre_n))?;
                cols.push(lp);
                let scaled = tape.scale(lp, self.alpha);
                objective = Some(tape.sub(objective.expect("value terms built"), scaled)?);
            }
            Some(cols)
        } else {
            None
        };

        let mean = tape.mean_all(objective.expect("nonempty chain"));
        let loss = tape.neg(mean);
        let value = tape.value(loss).get(0, 0);
        if !value.is_finite() {
            return Err(SspgError::non_finite("policy_gradient_loss", format!("loss {value}")));
        }
        Ok(PolicyLossParts {
            loss,
            q_term_roots,
            chain,
            pres,
            log_pi,
        })
    }
}

/// Norm of the policy gradient contributed by each value term separately;
/// later terms should fade for a well-mixed kernel.
pub fn per_term_gradient_norms(tape: &mut Tape, parts: &PolicyLossParts) -> Result<Vec<f64>> {
    let mut norms = Vec::with_capacity(parts.q_term_roots.len());
    for &root in &parts.q_term_roots {
        let grads = tape.backward(root)?;
        let sq: f64 = grads.values().map(|g| g.frob_norm().powi(2)).sum();
        norms.push(sq.sqrt());
    }
    Ok(norms)
}

/// Scale-reduction evaluation made during one action selection.
#[derive(Debug, Clone, Serialize)]
pub struct PsrfPoint {
    pub n: usize,
    pub r_p: f64,
    pub lambda_max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ActStats {
    /// Converged length used for the running-mean update.
    pub n_used: usize,
    /// Steps actually simulated.
    pub n_simulated: usize,
    pub converged: bool,
    /// True while uniform exploration is active (no reasoning performed).
    pub random_phase: bool,
    pub trace: Vec<PsrfPoint>,
}

impl ActStats {
    fn for_random_phase() -> Self {
        ActStats {
            n_used: 0,
            n_simulated: 0,
            converged: true,
            random_phase: true,
            trace: Vec::new(),
        }
    }

    pub fn final_r_p(&self) -> Option<f64> {
        self.trace.last().map(|p| p.r_p)
    }
}

/// One row of training telemetry per learn call.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub step: usize,
    pub policy_loss: f64,
    pub critic_loss: f64,
    pub alpha: f64,
    pub n_hat: f64,
    pub mean_r_p: f64,
}

pub struct SspgAgent {
    pub cfg: AgentConfig,
    pub policy: BeliefTransitionPolicy,
    pub critics: SoftQEnsemble,
    pub temperature: Temperature,
    pub memory: ShortTermActionMemory,
    pub replay: ReplayBuffer,
    pub convergence: ConvergenceState,
    pub env_steps: usize,
    pub learn_steps: usize,
    recent_r_p: Vec<f64>,
}

impl SspgAgent {
    pub fn new(cfg: AgentConfig, state_dim: usize, action_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut policy = BeliefTransitionPolicy::with_log_sigma_init(
            state_dim,
            action_dim,
            cfg.hidden.clone(),
            cfg.log_sigma_init,
            rng,
        )?;
        policy.log_sigma_min = cfg.log_sigma_min;
        policy.log_sigma_max = cfg.log_sigma_max;
        let critics = SoftQEnsemble::new(
            state_dim,
            action_dim,
            cfg.hidden.clone(),
            cfg.ensemble_size,
            cfg.effective_beta(),
            cfg.polyak,
            rng,
        )?;
        let temperature = match cfg.alpha_mode {
            TemperatureMode::Fixed => Temperature::fixed(cfg.alpha),
            TemperatureMode::Auto => Temperature::auto(
                cfg.alpha,
                cfg.target_entropy.unwrap_or(-(action_dim as f64)),
                cfg.alpha_lr,
            ),
        };
        let convergence = ConvergenceState::new(
            cfg.initial_n_hat,
            cfg.rho,
            cfg.psrf_threshold,
            cfg.max_reasoning_steps,
        )?;
        Ok(SspgAgent {
            memory: ShortTermActionMemory::new(cfg.memory_capacity, action_dim),
            replay: ReplayBuffer::new(cfg.replay_capacity),
            policy,
            critics,
            temperature,
            convergence,
            env_steps: 0,
            learn_steps: 0,
            recent_r_p: Vec::new(),
            cfg,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.policy.action_dim
    }

    pub fn state_dim(&self) -> usize {
        self.policy.state_dim
    }

    /// Truncation horizon for the learning chain.
    pub fn horizon(&self) -> usize {
        (self.convergence.n_hat.ceil() as usize).clamp(1, self.cfg.max_reasoning_steps)
    }

    /// Select an action at `state` by running the reasoning chain to
    /// convergence. During the initial exploration phase the action is a
    /// uniform cube sample and no reasoning happens.
    pub fn act(&mut self, state: &[f64], streams: &mut RngStreams) -> Result<(Vec<f64>, ActStats)> {
        self.env_steps += 1;
        if self.env_steps <= self.cfg.random_steps {
            let action = (0..self.action_dim())
                .map(|_| streams.env.random_range(-1.0f64..1.0))
                .collect();
            return Ok((action, ActStats::for_random_phase()));
        }

        let (chain, stats) = self.run_reasoning(state, streams)?;
        let action = if self.cfg.sample_full_history {
            let step = streams.memory.random_range(1..=chain.len());
            let row = streams.memory.random_range(0..chain.chains());
            chain.step(step).row(row).to_vec()
        } else {
            let row = streams.memory.random_range(0..chain.chains());
            chain.last().row(row).to_vec()
        };
        debug_assert!(action.iter().all(|v| v.abs() < 1.0));
        Ok((action, stats))
    }

    /// Harvest approximate steady-state samples by running converged
    /// reasoning chains and keeping every belief of each final batch.
    pub fn steady_state_samples(
        &mut self,
        state: &[f64],
        min_count: usize,
        streams: &mut RngStreams,
    ) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(min_count + self.cfg.initial_beliefs);
        while out.len() < min_count {
            let (chain, _) = self.run_reasoning(state, streams)?;
            let last = chain.last();
            for r in 0..last.rows() {
                out.push(last.row(r).to_vec());
            }
        }
        Ok(out)
    }

    /// The adaptive reasoning loop shared by acting and analysis: simulate
    /// from memory-seeded beliefs, evaluate convergence (first at the
    /// running-mean length, then backtrack or extend), update the running
    /// mean, and feed the memory.
    pub fn run_reasoning(&mut self, state: &[f64], streams: &mut RngStreams) -> Result<(ChainHistory, ActStats)> {
        let seed = self.memory.draw(self.cfg.initial_beliefs, &mut streams.memory);
        let mut chain = ChainHistory::new(state.to_vec(), seed.mat().clone());
        let n_max = self.cfg.max_reasoning_steps;
        let threshold = self.convergence.threshold;
        let variant = self.cfg.psrf_variant;

        // First evaluation at the running-mean length, then backtrack to
        // the smallest passing prefix or extend step by step.
        let n_first = (self.convergence.n_hat.floor() as usize).clamp(2, n_max);
        for _ in 0..n_first {
            self.policy.extend_chain(&mut chain, &mut streams.policy_noise)?;
        }
        let mut trace = Vec::new();
        let first = psrf_at(&chain, chain.len(), variant)?;
        trace.push(PsrfPoint {
            n: chain.len(),
            r_p: first.r_p,
            lambda_max: first.lambda_max,
        });

        let (n_used, converged) = if first.r_p < threshold {
            let mut best = chain.len();
            for n in (2..chain.len()).rev() {
                let rep = psrf_at(&chain, n, variant)?;
                trace.push(PsrfPoint {
                    n,
                    r_p: rep.r_p,
                    lambda_max: rep.lambda_max,
                });
                if rep.r_p < threshold {
                    best = n;
                } else {
                    break;
                }
            }
            (best, true)
        } else {
            loop {
                if chain.len() >= n_max {
                    break (n_max, false);
                }
                self.policy.extend_chain(&mut chain, &mut streams.policy_noise)?;
                let rep = psrf_at(&chain, chain.len(), variant)?;
                trace.push(PsrfPoint {
                    n: chain.len(),
                    r_p: rep.r_p,
                    lambda_max: rep.lambda_max,
                });
                if rep.r_p < threshold {
                    break (chain.len(), true);
                }
            }
        };

        update_running_steps(&mut self.convergence, n_used);
        for step in chain.steps() {
            self.memory.push_batch(step);
        }
        if let Some(r) = trace.last() {
            self.recent_r_p.push(r.r_p);
        }

        let stats = ActStats {
            n_used,
            n_simulated: chain.len(),
            converged,
            random_phase: false,
            trace,
        };
        Ok((chain, stats))
    }

    pub fn record_transition(&mut self, t: Transition) {
        self.replay.push(t);
    }

    pub fn ready_to_learn(&self) -> bool {
        self.replay.len() >= self.cfg.batch_size && self.replay.len() >= self.cfg.min_data
    }

    /// Policy objective for a single stored transition, as a value. The
    /// chain is seeded from `seed_action`, runs horizon+1 transitions with
    /// fresh noise, and sums value-minus-entropy terms along the way.
    pub fn policy_gradient_loss(&self, state: &[f64], seed_action: &[f64], rng: &mut impl Rng) -> Result<f64> {
        let horizon = self.horizon();
        let m = self.cfg.learn_chains.max(1);
        let noise: Vec<Mat> = (0..=horizon).map(|_| gaussian_noise(m, self.action_dim(), rng)).collect();
        let states = Mat::from_vec(1, self.state_dim(), state.to_vec());
        let seeds = Mat::from_vec(1, self.action_dim(), seed_action.to_vec());
        let mut tape = Tape::new();
        let parts = self.policy_objective().build(&mut tape, &states, &seeds, &noise)?;
        Ok(tape.value(parts.loss).get(0, 0))
    }

    pub fn policy_objective(&self) -> PolicyObjective<'_, SoftQEnsemble> {
        PolicyObjective {
            live: &self.policy,
            frozen: &self.policy,
            q: &self.critics,
            alpha: self.temperature.alpha(),
            chain_grad: self.cfg.chain_grad,
            learn_chains: self.cfg.learn_chains,
        }
    }

    fn batch_matrices(&self, indices: &[usize]) -> (Mat, Mat, Mat, Vec<f64>, Vec<f64>) {
        let rows = indices.len();
        let (ds, da) = (self.state_dim(), self.action_dim());
        let mut states = Mat::zeros(rows, ds);
        let mut next_states = Mat::zeros(rows, ds);
        let mut actions = Mat::zeros(rows, da);
        let mut rewards = Vec::with_capacity(rows);
        let mut not_done = Vec::with_capacity(rows);
        for (i, &idx) in indices.iter().enumerate() {
            let t = self.replay.get(idx);
            for j in 0..ds {
                states.set(i, j, t.state[j]);
                next_states.set(i, j, t.next_state[j]);
            }
            for j in 0..da {
                actions.set(i, j, t.action[j]);
            }
            rewards.push(t.reward);
            not_done.push(if t.done { 0.0 } else { 1.0 });
        }
        (states, next_states, actions, rewards, not_done)
    }

    /// Critic regression targets from a value-level chain at the successor
    /// states: draw a' from the final batch, estimate its steady-state
    /// log-density against the whole chain, and back it up.
    fn critic_targets(
        &self,
        next_states: &Mat,
        seeds: &Mat,
        rewards: &[f64],
        not_done: &[f64],
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        let horizon = self.horizon();
        let mut chain = Vec::with_capacity(horizon + 1);
        let mut prev = seeds.clone();
        let mut last_pre = None;
        for _ in 0..=horizon {
            let eps = gaussian_noise(prev.rows(), prev.cols(), rng);
            let (squashed, pre) = self.policy.transition_values_with_pre(next_states, &prev, &eps)?;
            prev = squashed;
            chain.push(prev.clone());
            last_pre = Some(pre);
        }
        let a_next = chain.last().expect("nonempty chain").clone();
        let alpha = self.temperature.alpha();
        let log_pi = if alpha > 0.0 {
            let mut conditioning = Vec::with_capacity(chain.len() + 1);
            conditioning.push(seeds.clone());
            conditioning.extend_from_slice(&chain);
            self.policy
                .mixture_log_density_values(next_states, &a_next, last_pre.as_ref(), &conditioning)?
        } else {
            vec![0.0; rewards.len()]
        };
        let (_, q_next) = self.critics.q_eval(next_states, &a_next, true)?;
        Ok((0..rewards.len())
            .map(|i| {
                SoftQEnsemble::bellman_target(rewards[i], self.cfg.gamma, not_done[i], q_next[i], log_pi[i], alpha)
            })
            .collect())
    }

    /// One learning call: policy step on the chain objective, critic
    /// regression toward gradient-stopped targets, delayed-copy blend, and
    /// the optional temperature update.
    pub fn learn_step(&mut self, streams: &mut RngStreams) -> Result<LossReport> {
        if !self.ready_to_learn() {
            return Err(SspgError::Contract(format!(
                "learn_step needs at least {} stored transitions, have {}",
                self.cfg.batch_size.max(self.cfg.min_data),
                self.replay.len()
            )));
        }
        let indices = self.replay.sample_indices(self.cfg.batch_size, &mut streams.buffer);
        let (states, next_states, actions, rewards, not_done) = self.batch_matrices(&indices);
        let chain_states = match self.cfg.policy_state {
            PolicyStateSource::Successor => next_states.clone(),
            PolicyStateSource::Current => states.clone(),
        };

        let horizon = self.horizon();
        let m_chains = self.cfg.learn_chains.max(1);
        let noise: Vec<Mat> = (0..=horizon)
            .map(|_| gaussian_noise(self.cfg.batch_size * m_chains, self.action_dim(), &mut streams.policy_noise))
            .collect();

        // Policy phase. The graph borrows the policy immutably; extract the
        // gradients and every value the critic phase needs before stepping.
        let (grads, policy_loss, mean_log_pi, shared_chain, last_log_pi) = {
            let mut tape = Tape::new();
            let parts = self.policy_objective().build(&mut tape, &chain_states, &actions, &noise)?;
            let policy_loss = tape.value(parts.loss).get(0, 0);
            let (mean_log_pi, last_log_pi) = match &parts.log_pi {
                Some(cols) => {
                    let mut total = 0.0;
                    let mut count = 0usize;
                    for &c in cols {
                        let v = tape.value(c);
                        total += v.data().iter().sum::<f64>();
                        count += v.rows();
                    }
                    let last = tape.value(*cols.last().expect("nonempty")).data().to_vec();
                    (total / count as f64, Some(last))
                }
                None => (0.0, None),
            };
            let chain_values: Vec<Mat> = parts.chain.iter().map(|&n| tape.value(n).clone()).collect();
            let grads = tape.backward(parts.loss)?;
            (grads, policy_loss, mean_log_pi, chain_values, last_log_pi)
        };
        self.policy
            .params
            .adam_step(&grads, self.cfg.policy_lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)?;

        // Critic phase. The fused first update reuses the pre-update chain
        // when it ran at the successor states; extra UTD iterations
        // re-simulate on fresh batches.
        let alpha = self.temperature.alpha();
        let mut critic_loss = 0.0;
        for u in 0..self.cfg.critic_utd {
            let (targets, s_mat, a_mat) = if u == 0 {
                let targets = if self.cfg.policy_state == PolicyStateSource::Successor {
                    // One draw per transition: the first sibling chain's
                    // final belief.
                    let full = shared_chain.last().expect("nonempty");
                    let mut a_next = Mat::zeros(rewards.len(), self.action_dim());
                    for b in 0..rewards.len() {
                        for j in 0..self.action_dim() {
                            a_next.set(b, j, full.get(b * m_chains, j));
                        }
                    }
                    let log_pi: Vec<f64> = match &last_log_pi {
                        Some(lp) => (0..rewards.len()).map(|b| lp[b * m_chains]).collect(),
                        None => vec![0.0; rewards.len()],
                    };
                    let (_, q_next) = self.critics.q_eval(&next_states, &a_next, true)?;
                    (0..rewards.len())
                        .map(|i| {
                            SoftQEnsemble::bellman_target(
                                rewards[i],
                                self.cfg.gamma,
                                not_done[i],
                                q_next[i],
                                log_pi[i],
                                alpha,
                            )
                        })
                        .collect()
                } else {
                    self.critic_targets(&next_states, &actions, &rewards, &not_done, &mut streams.policy_noise)?
                };
                (targets, states.clone(), actions.clone())
            } else {
                let idx = self.replay.sample_indices(self.cfg.batch_size, &mut streams.buffer);
                let (s, s2, a, r, nd) = self.batch_matrices(&idx);
                let t = self.critic_targets(&s2, &a, &r, &nd, &mut streams.policy_noise)?;
                (t, s, a)
            };
            critic_loss = self.critics.bellman_update(&s_mat, &a_mat, &targets, self.cfg.critic_lr)?;
            self.critics.polyak_update()?;
        }

        if self.cfg.alpha_mode == TemperatureMode::Auto {
            self.temperature.update(mean_log_pi);
        }

        self.learn_steps += 1;
        let mean_r_p = if self.recent_r_p.is_empty() {
            f64::NAN
        } else {
            let m = self.recent_r_p.iter().sum::<f64>() / self.recent_r_p.len() as f64;
            self.recent_r_p.clear();
            m
        };
        Ok(LossReport {
            step: self.learn_steps,
            policy_loss,
            critic_loss,
            alpha: self.temperature.alpha(),
            n_hat: self.convergence.n_hat,
            mean_r_p,
        })
    }
}
