//! Belief-transition policy: the squashed-Gaussian kernel that drives the
//! reasoning Markov chain.
//!
//! One reasoning step maps a batch of action beliefs `a` (and the fixed
//! environment state `s`) to `tanh(mu(s,a) + sigma(s,a) * eps)`. Clamping
//! the log-deviation head keeps the transition density strictly positive on
//! the open action cube for every parameter setting, which is what
//! guarantees a unique steady-state distribution for the chain to converge
//! to, and the noise `eps` enters as a plain input so the whole chain stays
//! differentiable when replayed.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffcore::{mlp_forward, Binding, Mat, MlpSpec, NodeId, ParamStore, Tape};
use crate::error::{Result, SspgError};

/// Parameter prefix used by the policy network inside its store.
pub const POLICY_PREFIX: &str = "policy";

/// Boundary margin when mapping stored actions back through atanh.
pub const ATANH_CLIP: f64 = 1e-6;

/// Margin keeping extracted beliefs strictly inside the cube even when the
/// squash saturates in f64.
const CUBE_MARGIN: f64 = 1e-12;

pub fn gaussian_noise(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.sample(StandardNormal);
    }
    m
}

/// M parallel action beliefs, each coordinate strictly inside (-1, 1).
/// At least two are required so chain diagnostics are always defined.
#[derive(Debug, Clone)]
pub struct ActionBeliefBatch(Mat);

impl ActionBeliefBatch {
    pub fn new(mat: Mat) -> Result<Self> {
        if mat.rows() < 2 {
            return Err(SspgError::InsufficientChains {
                needed: 2,
                got: mat.rows(),
            });
        }
        if !mat.data().iter().all(|&v| v > -1.0 && v < 1.0) {
            return Err(SspgError::Contract(
                "action beliefs must lie strictly inside (-1, 1)".into(),
            ));
        }
        Ok(ActionBeliefBatch(mat))
    }

    /// Wrap squashed network output, nudging saturated coordinates off the
    /// boundary.
    pub fn from_squashed(mat: Mat) -> Result<Self> {
        let lim = 1.0 - CUBE_MARGIN;
        Self::new(mat.map(|v| v.clamp(-lim, lim)))
    }

    pub fn uniform(m: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let lim = 1.0 - CUBE_MARGIN;
        let mut mat = Mat::zeros(m, dim);
        for v in mat.data_mut() {
            *v = rng.random_range(-1.0f64..1.0).clamp(-lim, lim);
        }
        ActionBeliefBatch(mat)
    }

    pub fn mat(&self) -> &Mat {
        &self.0
    }

    pub fn chains(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }
}

/// Record of a simulated reasoning chain: the originating state, the seed
/// batch, the batches after steps 1..N, and the noise that produced them
/// (so the exact chain can be replayed differentiably).
#[derive(Debug, Clone)]
pub struct ChainHistory {
    state: Vec<f64>,
    start: Mat,
    steps: Vec<Mat>,
    noise: Vec<Mat>,
}

impl ChainHistory {
    pub fn new(state: Vec<f64>, start: Mat) -> Self {
        ChainHistory {
            state,
            start,
            steps: Vec::new(),
            noise: Vec::new(),
        }
    }

    /// Build a history directly from per-step batches (used by diagnostics
    /// over synthetic chains).
    pub fn from_steps(state: Vec<f64>, start: Mat, steps: Vec<Mat>) -> Result<Self> {
        let (m, d) = start.shape();
        for s in &steps {
            if s.shape() != (m, d) {
                return Err(SspgError::dimension(
                    "ChainHistory::from_steps",
                    format!("{:?}", (m, d)),
                    format!("{:?}", s.shape()),
                ));
            }
        }
        Ok(ChainHistory {
            state,
            start,
            steps,
            noise: Vec::new(),
        })
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn start(&self) -> &Mat {
        &self.start
    }

    /// Number of steps beyond the seed batch.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn chains(&self) -> usize {
        self.start.rows()
    }

    pub fn dim(&self) -> usize {
        self.start.cols()
    }

    /// Batch after step `n` (1-based; `step(0)` is the seed).
    pub fn step(&self, n: usize) -> &Mat {
        if n == 0 {
            &self.start
        } else {
            &self.steps[n - 1]
        }
    }

    pub fn last(&self) -> &Mat {
        self.steps.last().unwrap_or(&self.start)
    }

    pub fn steps(&self) -> &[Mat] {
        &self.steps
    }

    pub fn noise(&self) -> &[Mat] {
        &self.noise
    }

    fn push(&mut self, batch: Mat, noise: Mat) {
        self.steps.push(batch);
        self.noise.push(noise);
    }

    /// Seed batch plus every step batch, in order.
    pub fn all_batches(&self) -> impl Iterator<Item = &Mat> {
        std::iter::once(&self.start).chain(self.steps.iter())
    }
}

/// Squashed belief node plus the pre-squash value that produced it.
#[derive(Debug, Clone, Copy)]
pub struct ChainStepNodes {
    pub squashed: NodeId,
    pub pre: NodeId,
}

/// How an evaluation point enters a density computation.
#[derive(Debug, Clone, Copy)]
pub enum DensityPoint {
    /// A squashed action (e.g. stored replay data); its pre-squash value
    /// is reconstructed with a clipped atanh.
    Squashed(NodeId),
    /// The exact pre-squash value from the transition that produced the
    /// action.
    PreSquash(NodeId),
}

#[derive(Debug, Clone)]
pub struct BeliefTransitionPolicy {
    pub spec: MlpSpec,
    pub params: ParamStore,
    pub state_dim: usize,
    pub action_dim: usize,
    pub log_sigma_min: f64,
    pub log_sigma_max: f64,
    /// Tanh squash on transitions. Disabled only by linear-chain test
    /// harnesses that need an unbounded kernel.
    pub squash: bool,
    /// Lower clamp on mixture log-densities.
    pub log_density_floor: f64,
}

impl BeliefTransitionPolicy {
    pub fn new(state_dim: usize, action_dim: usize, hidden: Vec<usize>, rng: &mut impl Rng) -> Result<Self> {
        Self::with_log_sigma_init(state_dim, action_dim, hidden, 0.0, rng)
    }

    /// Construct with the noise head's output bias offset to
    /// `log_sigma_init`, so transitions start at a chosen spread instead of
    /// sigma = 1.
    pub fn with_log_sigma_init(
        state_dim: usize,
        action_dim: usize,
        hidden: Vec<usize>,
        log_sigma_init: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let spec = MlpSpec::new(state_dim + action_dim, hidden, 2 * action_dim);
        let mut params = ParamStore::new();
        spec.init_params(&mut params, POLICY_PREFIX, rng)?;
        if log_sigma_init != 0.0 {
            let last = spec.hidden.len();
            let bias_name = MlpSpec::bias_name(POLICY_PREFIX, last);
            let mut bias = params.get(&bias_name)?.clone();
            for j in action_dim..2 * action_dim {
                let v = bias.get(0, j) + log_sigma_init;
                bias.set(0, j, v);
            }
            let mut patch = ParamStore::new();
            patch.insert(&bias_name, bias)?;
            params.copy_values_from(&patch)?;
        }
        Ok(BeliefTransitionPolicy {
            spec,
            params,
            state_dim,
            action_dim,
            log_sigma_min: -5.0,
            log_sigma_max: 2.0,
            squash: true,
            log_density_floor: -700.0,
        })
    }

    /// Fixed affine kernel `a' = squash(theta1 * a + theta0 + sigma * eps)`
    /// over a one-dimensional state/action space. The chain it drives is an
    /// AR(1) process when the squash is disabled, which gives closed-form
    /// steady-state statistics; analysis code and oracle tests build on it.
    pub fn affine_1d(theta0: f64, theta1: f64, sigma: f64, squash: bool) -> Self {
        let spec = MlpSpec::new(2, vec![], 2);
        let mut params = ParamStore::new();
        // Input columns are [s, a]; output columns are [mu, log_sigma].
        params
            .insert("policy/w0", Mat::from_vec(2, 2, vec![0.0, 0.0, theta1, 0.0]))
            .expect("fresh store");
        params
            .insert("policy/b0", Mat::from_vec(1, 2, vec![theta0, sigma.ln()]))
            .expect("fresh store");
        BeliefTransitionPolicy {
            spec,
            params,
            state_dim: 1,
            action_dim: 1,
            log_sigma_min: -20.0,
            log_sigma_max: 20.0,
            squash,
            log_density_floor: -700.0,
        }
    }

    pub fn state_node(&self, tape: &mut Tape, state: &[f64], rows: usize) -> NodeId {
        tape.constant(Mat::tile_row(state, rows))
    }

    /// Mean and clamped log-deviation heads for a (state, belief) batch.
    pub fn heads_on_tape(
        &self,
        tape: &mut Tape,
        s: NodeId,
        a: NodeId,
        binding: Binding,
    ) -> Result<(NodeId, NodeId)> {
        let x = tape.concat_cols(s, a)?;
        let out = mlp_forward(tape, &self.spec, &self.params, POLICY_PREFIX, x, binding)?;
        let d = self.action_dim;
        let mu = tape.slice_cols(out, 0, d)?;
        let ls_raw = tape.slice_cols(out, d, d)?;
        let ls = tape.clamp(ls_raw, self.log_sigma_min, self.log_sigma_max);
        Ok((mu, ls))
    }

    /// One reasoning step on the tape: `tanh(mu + sigma * eps)` (or the
    /// unsquashed affine version). Differentiable w.r.t. the belief input
    /// always, and w.r.t. parameters iff `binding` is trainable. The
    /// pre-squash node is returned alongside so densities of this belief
    /// can be evaluated exactly even when the squash saturates.
    pub fn transition_on_tape(
        &self,
        tape: &mut Tape,
        s: NodeId,
        a: NodeId,
        eps: &Mat,
        binding: Binding,
    ) -> Result<ChainStepNodes> {
        let (mu, ls) = self.heads_on_tape(tape, s, a, binding)?;
        let sigma = tape.exp(ls);
        let e = tape.constant(eps.clone());
        let scaled = tape.mul_elem(sigma, e)?;
        let pre = tape.add(mu, scaled)?;
        let squashed = if self.squash { tape.tanh(pre) } else { pre };
        Ok(ChainStepNodes { squashed, pre })
    }

    /// Value-level reasoning step for a belief batch.
    pub fn transition_sample(
        &self,
        state: &[f64],
        beliefs: &ActionBeliefBatch,
        eps: &Mat,
    ) -> Result<ActionBeliefBatch> {
        let out = self.transition_values(state, beliefs.mat(), eps)?;
        ActionBeliefBatch::from_squashed(out)
    }

    /// Raw transition on matrices; also the path used when the squash is
    /// disabled.
    pub fn transition_values(&self, state: &[f64], beliefs: &Mat, eps: &Mat) -> Result<Mat> {
        self.transition_values_batch(&Mat::tile_row(state, beliefs.rows()), beliefs, eps)
    }

    /// Transition with one state per row (learning batches mix states).
    pub fn transition_values_batch(&self, states: &Mat, beliefs: &Mat, eps: &Mat) -> Result<Mat> {
        let mut tape = Tape::new();
        let s = tape.constant(states.clone());
        let a = tape.constant(beliefs.clone());
        let (mu, ls) = self.heads_on_tape(&mut tape, s, a, Binding::Frozen)?;
        if !tape.value(mu).all_finite() || !tape.value(ls).all_finite() {
            return Err(SspgError::non_finite(
                "transition_sample",
                format!(
                    "network heads produced non-finite output at state {:?} (param step {})",
                    states.row(0),
                    self.params.step_count()
                ),
            ));
        }
        let sigma = tape.exp(ls);
        let e = tape.constant(eps.clone());
        let scaled = tape.mul_elem(sigma, e)?;
        let pre = tape.add(mu, scaled)?;
        let out = if self.squash { tape.tanh(pre) } else { pre };
        Ok(tape.value(out).clone())
    }

    /// Like [`transition_values_batch`](Self::transition_values_batch) but
    /// also returns the pre-squash values.
    pub fn transition_values_with_pre(&self, states: &Mat, beliefs: &Mat, eps: &Mat) -> Result<(Mat, Mat)> {
        let mut tape = Tape::new();
        let s = tape.constant(states.clone());
        let a = tape.constant(beliefs.clone());
        let step = self.transition_on_tape(&mut tape, s, a, eps, Binding::Frozen)?;
        let squashed = tape.value(step.squashed).clone();
        if !squashed.all_finite() {
            return Err(SspgError::non_finite(
                "transition_sample",
                format!("non-finite beliefs at param step {}", self.params.step_count()),
            ));
        }
        Ok((squashed, tape.value(step.pre).clone()))
    }

    /// Per-row log-density under the Gaussian heads, including the tanh
    /// change-of-variables correction when squashing is on.
    ///
    /// Evaluation points carried as pre-squash values use the exact
    /// softplus form of the correction, so saturated beliefs keep honest
    /// (very high) density estimates instead of rewarding boundary escape;
    /// stored actions only known post-squash are pulled off the boundary
    /// by `ATANH_CLIP` before the atanh.
    pub fn log_prob_on_tape(
        &self,
        tape: &mut Tape,
        mu: NodeId,
        log_sigma: NodeId,
        at: DensityPoint,
    ) -> Result<NodeId> {
        let d = self.action_dim as f64;
        let (u, correction) = match (self.squash, at) {
            (false, DensityPoint::Squashed(node)) | (false, DensityPoint::PreSquash(node)) => (node, None),
            (true, DensityPoint::Squashed(a_next)) => {
                let clipped = tape.clamp(a_next, -1.0 + ATANH_CLIP, 1.0 - ATANH_CLIP);
                let u = tape.atanh(clipped);
                let sq = tape.mul_elem(clipped, clipped)?;
                let neg_sq = tape.neg(sq);
                let one_minus = tape.shift(neg_sq, 1.0);
                let ln_det = tape.ln(one_minus);
                (u, Some(tape.row_sum(ln_det)))
            }
            (true, DensityPoint::PreSquash(pre)) => {
                // log(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u)).
                let neg2u = tape.scale(pre, -2.0);
                let sp = tape.softplus(neg2u);
                let upper = tape.shift(pre, -std::f64::consts::LN_2);
                let inner = tape.add(upper, sp)?;
                let ln_det = tape.scale(inner, -2.0);
                (pre, Some(tape.row_sum(ln_det)))
            }
        };
        let sigma = tape.exp(log_sigma);
        let diff = tape.sub(u, mu)?;
        let z = tape.div_elem(diff, sigma)?;
        let z2 = tape.mul_elem(z, z)?;
        let quad = tape.row_sum(z2);
        let quad = tape.scale(quad, -0.5);
        let ls_sum = tape.row_sum(log_sigma);
        let lp = tape.sub(quad, ls_sum)?;
        let lp = tape.shift(lp, -0.5 * d * (2.0 * std::f64::consts::PI).ln());
        match correction {
            Some(c) => tape.sub(lp, c),
            None => Ok(lp),
        }
    }

    /// Log transition density for single beliefs, as a plain value.
    pub fn log_prob(&self, state: &[f64], a: &[f64], a_next: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let s = self.state_node(&mut tape, state, 1);
        let an = tape.constant(Mat::from_vec(1, self.action_dim, a.to_vec()));
        let (mu, ls) = self.heads_on_tape(&mut tape, s, an, Binding::Frozen)?;
        let next = tape.constant(Mat::from_vec(1, self.action_dim, a_next.to_vec()));
        let lp = self.log_prob_on_tape(&mut tape, mu, ls, DensityPoint::Squashed(next))?;
        Ok(tape.value(lp).get(0, 0))
    }

    /// Extend a chain by one step, drawing fresh noise.
    pub fn extend_chain(&self, chain: &mut ChainHistory, rng: &mut impl Rng) -> Result<()> {
        let eps = gaussian_noise(chain.chains(), chain.dim(), rng);
        let next = self.transition_values(&chain.state.clone(), chain.last(), &eps)?;
        let next = if self.squash {
            let lim = 1.0 - CUBE_MARGIN;
            next.map(|v| v.clamp(-lim, lim))
        } else {
            next
        };
        chain.push(next, eps);
        Ok(())
    }

    /// Simulate `n_steps` reasoning steps from a seed batch, recording the
    /// noise for replay.
    pub fn simulate_chain(
        &self,
        state: &[f64],
        start: &ActionBeliefBatch,
        n_steps: usize,
        rng: &mut impl Rng,
    ) -> Result<ChainHistory> {
        if n_steps == 0 {
            return Err(SspgError::Contract("simulate_chain needs n_steps >= 1".into()));
        }
        let mut chain = ChainHistory::new(state.to_vec(), start.mat().clone());
        for _ in 0..n_steps {
            self.extend_chain(&mut chain, rng)?;
        }
        Ok(chain)
    }

    /// Unsquashed variant used by linear-kernel harnesses.
    pub fn simulate_chain_raw(
        &self,
        state: &[f64],
        start: Mat,
        n_steps: usize,
        rng: &mut impl Rng,
    ) -> Result<ChainHistory> {
        let mut chain = ChainHistory::new(state.to_vec(), start);
        for _ in 0..n_steps {
            self.extend_chain(&mut chain, rng)?;
        }
        Ok(chain)
    }

    /// Mixture log-density of `eval` under the transition kernels
    /// conditioned on each belief in `conditioning`:
    /// `log mean_k exp(log_prob(eval | cond_k, s))`, floored.
    ///
    /// This is the nested Monte-Carlo estimate of the steady-state
    /// log-density when the conditioning points are chain samples. Both the
    /// evaluation point and the conditioning points may be live graph nodes.
    pub fn mixture_log_density_on_tape(
        &self,
        tape: &mut Tape,
        s: NodeId,
        eval: DensityPoint,
        conditioning: &[NodeId],
        binding: Binding,
    ) -> Result<NodeId> {
        if conditioning.is_empty() {
            return Err(SspgError::Contract(
                "mixture_log_density needs at least one conditioning belief".into(),
            ));
        }
        let mut heads = Vec::with_capacity(conditioning.len());
        for &cond in conditioning {
            heads.push(self.heads_on_tape(tape, s, cond, binding)?);
        }
        self.mixture_log_density_from_heads(tape, &heads, eval)
    }

    /// Mixture log-density from precomputed per-component head pairs.
    /// Row i of the result mixes component densities evaluated at row i of
    /// the evaluation point under row i of every head pair.
    pub fn mixture_log_density_from_heads(
        &self,
        tape: &mut Tape,
        heads: &[(NodeId, NodeId)],
        eval: DensityPoint,
    ) -> Result<NodeId> {
        if heads.is_empty() {
            return Err(SspgError::Contract(
                "mixture_log_density needs at least one component".into(),
            ));
        }
        let mut columns: Option<NodeId> = None;
        for &(mu, ls) in heads {
            let lp = self.log_prob_on_tape(tape, mu, ls, eval)?;
            columns = Some(match columns {
                None => lp,
                Some(acc) => tape.concat_cols(acc, lp)?,
            });
        }
        let stacked = columns.expect("non-empty heads");
        let lse = tape.log_sum_exp_rows(stacked);
        let avg = tape.shift(lse, -(heads.len() as f64).ln());
        Ok(tape.clamp(avg, self.log_density_floor, f64::INFINITY))
    }

    /// Value-level mixture log-density for a batch: row i of the result is
    /// the floored log of the average transition density of `eval` row i
    /// under the heads at each conditioning batch's row i.
    pub fn mixture_log_density_values(
        &self,
        states: &Mat,
        eval: &Mat,
        eval_pre: Option<&Mat>,
        conditioning: &[Mat],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let s = tape.constant(states.clone());
        let point = match eval_pre {
            Some(pre) => DensityPoint::PreSquash(tape.constant(pre.clone())),
            None => DensityPoint::Squashed(tape.constant(eval.clone())),
        };
        let cond_nodes: Vec<NodeId> = conditioning.iter().map(|c| tape.constant(c.clone())).collect();
        let lp = self.mixture_log_density_on_tape(&mut tape, s, point, &cond_nodes, Binding::Frozen)?;
        Ok(tape.value(lp).data().to_vec())
    }

    /// Steady-state log-density estimate of a single action under a
    /// simulated chain (seed batch plus every step batch), as a value.
    pub fn ss_log_prob_estimate(&self, state: &[f64], action: &[f64], chain: &ChainHistory) -> Result<f64> {
        let mut tape = Tape::new();
        // All beliefs of all batches act as mixture components; batching
        // them as rows needs only a single network evaluation.
        let total = chain.chains() * (chain.len() + 1);
        let mut rows = Vec::with_capacity(total);
        for batch in chain.all_batches() {
            for r in 0..batch.rows() {
                rows.push(batch.row(r).to_vec());
            }
        }
        let cond = tape.constant(Mat::from_rows(&rows));
        let s = self.state_node(&mut tape, state, total);
        let (mu, ls) = self.heads_on_tape(&mut tape, s, cond, Binding::Frozen)?;
        let eval_tiled = tape.constant(Mat::tile_row(action, total));
        let lp_col = self.log_prob_on_tape(&mut tape, mu, ls, DensityPoint::Squashed(eval_tiled))?;
        let lp_row = tape.transpose(lp_col);
        let lse = tape.log_sum_exp_rows(lp_row);
        let avg = tape.shift(lse, -(total as f64).ln());
        let floored = tape.clamp(avg, self.log_density_floor, f64::INFINITY);
        let out = tape.value(floored).get(0, 0);
        if out <= self.log_density_floor {
            eprintln!(
                "warning: steady-state log-density floored at {} for action {:?}",
                self.log_density_floor, action
            );
        }
        Ok(out)
    }
}
