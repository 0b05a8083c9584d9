//! Soft Q-function ensemble with delayed target copies.
//!
//! K networks map a (state, action) pair to a scalar value. The aggregate
//! used everywhere downstream is `mean - beta * std` across members, a
//! pessimism penalty that is inert for a single critic. Targets come from
//! the delayed copies, which trail the online parameters through Polyak
//! averaging.

use rand::Rng;

use crate::diffcore::{mlp_forward, Binding, Mat, MlpSpec, NodeId, ParamStore, Tape, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
use crate::error::{Result, SspgError};

fn member_prefix(k: usize) -> String {
    format!("q{k}")
}

#[derive(Debug, Clone)]
pub struct SoftQEnsemble {
    pub spec: MlpSpec,
    pub online: ParamStore,
    pub delayed: ParamStore,
    pub members: usize,
    /// Spread penalty on the aggregate; 0 disables it.
    pub penalty_beta: f64,
    /// Delayed-copy retention per update: phi' <- tau phi' + (1-tau) phi.
    pub polyak: f64,
    pub state_dim: usize,
    pub action_dim: usize,
}

/// Per-member values plus the penalized aggregate, as tape nodes
/// (one column per batch row).
pub struct QEvalNodes {
    pub members: Vec<NodeId>,
    pub aggregate: NodeId,
}

impl SoftQEnsemble {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: Vec<usize>,
        members: usize,
        penalty_beta: f64,
        polyak: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if members == 0 {
            return Err(SspgError::Contract("ensemble needs at least one member".into()));
        }
        let spec = MlpSpec::new(state_dim + action_dim, hidden, 1);
        let mut online = ParamStore::new();
        for k in 0..members {
            spec.init_params(&mut online, &member_prefix(k), rng)?;
        }
        let delayed = online.clone();
        Ok(SoftQEnsemble {
            spec,
            online,
            delayed,
            members,
            penalty_beta,
            polyak,
            state_dim,
            action_dim,
        })
    }

    /// Evaluate all members on the tape. `binding` controls whether critic
    /// parameters receive gradients; the policy objective evaluates with
    /// `Frozen` so gradients reach only the action input.
    pub fn q_eval_on_tape(
        &self,
        tape: &mut Tape,
        s: NodeId,
        a: NodeId,
        use_delayed: bool,
        binding: Binding,
    ) -> Result<QEvalNodes> {
        let store = if use_delayed { &self.delayed } else { &self.online };
        let x = tape.concat_cols(s, a)?;
        let mut members = Vec::with_capacity(self.members);
        for k in 0..self.members {
            members.push(mlp_forward(tape, &self.spec, store, &member_prefix(k), x, binding)?);
        }
        let aggregate = self.aggregate_on_tape(tape, &members)?;
        Ok(QEvalNodes { members, aggregate })
    }

    fn aggregate_on_tape(&self, tape: &mut Tape, members: &[NodeId]) -> Result<NodeId> {
        let mut sum = members[0];
        for &m in &members[1..] {
            sum = tape.add(sum, m)?;
        }
        let mean = tape.scale(sum, 1.0 / self.members as f64);
        if self.penalty_beta == 0.0 || self.members == 1 {
            return Ok(mean);
        }
        // Population std across members.
        let mut var_sum: Option<NodeId> = None;
        for &m in members {
            let diff = tape.sub(m, mean)?;
            let sq = tape.mul_elem(diff, diff)?;
            var_sum = Some(match var_sum {
                None => sq,
                Some(acc) => tape.add(acc, sq)?,
            });
        }
        let var = tape.scale(var_sum.expect("members nonempty"), 1.0 / self.members as f64);
        let std = tape.sqrt(var);
        let penalty = tape.scale(std, self.penalty_beta);
        tape.sub(mean, penalty)
    }

    /// Value-level evaluation: per-member values and the aggregate for each
    /// batch row.
    pub fn q_eval(&self, states: &Mat, actions: &Mat, use_delayed: bool) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let mut tape = Tape::new();
        let s = tape.constant(states.clone());
        let a = tape.constant(actions.clone());
        let nodes = self.q_eval_on_tape(&mut tape, s, a, use_delayed, Binding::Frozen)?;
        let members = nodes
            .members
            .iter()
            .map(|&m| tape.value(m).data().to_vec())
            .collect();
        let aggregate = tape.value(nodes.aggregate).data().to_vec();
        Ok((members, aggregate))
    }

    /// Soft Bellman backup value; the caller passes `not_done = 0` on
    /// terminal transitions, which reduces the target to the raw reward.
    /// Pure arithmetic on already-extracted values, so nothing can leak
    /// gradients into the policy or online critics.
    pub fn bellman_target(reward: f64, gamma: f64, not_done: f64, delayed_aggregate: f64, log_pi_ss: f64, alpha: f64) -> f64 {
        reward + gamma * not_done * (delayed_aggregate - alpha * log_pi_ss)
    }

    /// One squared-error regression step of every member toward shared
    /// targets. Returns the mean loss across members.
    pub fn bellman_update(&mut self, states: &Mat, actions: &Mat, targets: &[f64], lr: f64) -> Result<f64> {
        if targets.len() != states.rows() {
            return Err(SspgError::dimension(
                "bellman_update",
                format!("{} targets", states.rows()),
                format!("{}", targets.len()),
            ));
        }
        let mut tape = Tape::new();
        let s = tape.constant(states.clone());
        let a = tape.constant(actions.clone());
        let t = tape.constant(Mat::from_vec(targets.len(), 1, targets.to_vec()));
        let x = tape.concat_cols(s, a)?;
        let mut loss_sum: Option<NodeId> = None;
        for k in 0..self.members {
            let pred = mlp_forward(&mut tape, &self.spec, &self.online, &member_prefix(k), x, Binding::Trainable)?;
            let err = tape.sub(pred, t)?;
            let sq = tape.mul_elem(err, err)?;
            let mse = tape.mean_all(sq);
            loss_sum = Some(match loss_sum {
                None => mse,
                Some(acc) => tape.add(acc, mse)?,
            });
        }
        let total = loss_sum.expect("members nonempty");
        let loss = tape.value(total).get(0, 0) / self.members as f64;
        if !loss.is_finite() {
            return Err(SspgError::non_finite(
                "bellman_update",
                format!("loss {loss} on batch of {}", targets.len()),
            ));
        }
        let grads = tape.backward(total)?;
        self.online.adam_step(&grads, lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)?;
        Ok(loss)
    }

    /// phi' <- tau phi' + (1 - tau) phi.
    pub fn polyak_update(&mut self) -> Result<()> {
        self.delayed.polyak_from(&self.online, self.polyak)
    }
}
