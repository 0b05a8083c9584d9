//! Oracle suite for the policy-gradient estimator and the agent loop:
//! closed-form AR(1) steady-state gradients, finite-difference checks with
//! common random numbers, gradient-stop audits, and acting behavior on
//! kernels with known dynamics.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sspg::agent::{
    per_term_gradient_norms, AgentConfig, ChainGrad, PolicyObjective, QObjective, SspgAgent, Transition,
};
use sspg::btpolicy::BeliefTransitionPolicy;
use sspg::critic::SoftQEnsemble;
use sspg::diffcore::{Binding, Mat, NodeId, ParamStore, Tape, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
use sspg::envs::{EnvConfig, EnvRegistry};
use sspg::rng::RngStreams;

/// Analytic value surrogate `Q(a) = -(a - center)^2` summed over
/// coordinates, recorded on the tape.
struct QuadraticQ {
    center: f64,
}

impl QObjective for QuadraticQ {
    fn q_aggregate_on_tape(&self, tape: &mut Tape, _s: NodeId, a: NodeId) -> sspg::Result<NodeId> {
        let shifted = tape.shift(a, -self.center);
        let sq = tape.mul_elem(shifted, shifted)?;
        let row = tape.row_sum(sq);
        Ok(tape.neg(row))
    }
}

fn standard_normals(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

// ---------------------------------------------------------------------
// Truncation base case: a single transition reduces the objective to the
// one-step reparameterized gradient, checked against a hand derivation.
// ---------------------------------------------------------------------
#[test]
fn single_transition_matches_hand_reparameterized_gradient() {
    let (theta0, theta1, sigma) = (0.25, 0.4, 0.6);
    let policy = BeliefTransitionPolicy::affine_1d(theta0, theta1, sigma, true);
    let q = QuadraticQ { center: 0.0 };
    let objective = PolicyObjective {
        live: &policy,
        frozen: &policy,
        q: &q,
        alpha: 0.0,
        chain_grad: ChainGrad::FirstStep,
        learn_chains: 1,
    };

    let rows = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seeds = Mat::from_vec(rows, 1, standard_normals(rows, &mut rng).iter().map(|v| 0.5 * v.tanh()).collect());
    let eps = Mat::from_vec(rows, 1, standard_normals(rows, &mut rng));
    let states = Mat::zeros(rows, 1);

    let mut tape = Tape::new();
    let parts = objective.build(&mut tape, &states, &seeds, &[eps.clone()]).unwrap();
    let grads = tape.backward(parts.loss).unwrap();

    // Hand derivation: L = mean a0^2 with a0 = tanh(pre),
    // pre = theta1 * seed + theta0 + sigma * eps.
    let (mut g_b0, mut g_w, mut g_ls) = (0.0, 0.0, 0.0);
    for i in 0..rows {
        let pre = theta1 * seeds.get(i, 0) + theta0 + sigma * eps.get(i, 0);
        let a0 = pre.tanh();
        let dl_da0 = 2.0 * a0 / rows as f64;
        let da0_dpre = 1.0 - a0 * a0;
        g_b0 += dl_da0 * da0_dpre;
        g_w += dl_da0 * da0_dpre * seeds.get(i, 0);
        // log-sigma head enters through sigma * eps with sigma = exp(ls).
        g_ls += dl_da0 * da0_dpre * sigma * eps.get(i, 0);
    }
    assert!((grads["policy/b0"].get(0, 0) - g_b0).abs() <= 1e-12);
    assert!((grads["policy/w0"].get(1, 0) - g_w).abs() <= 1e-12);
    assert!((grads["policy/b0"].get(0, 1) - g_ls).abs() <= 1e-12);
    // The state input is zero, so its weight gets no gradient.
    assert!(grads["policy/w0"].get(0, 0).abs() <= 1e-15);
}

// ---------------------------------------------------------------------
// Finite differences with common random numbers: the frozen copy of the
// kernel is pinned while every live parameter coordinate is perturbed.
// ---------------------------------------------------------------------
#[test]
fn policy_gradient_matches_finite_differences_across_horizons() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let reference = BeliefTransitionPolicy::new(1, 1, vec![16, 16], &mut rng).unwrap();
    let critic = SoftQEnsemble::new(1, 1, vec![16, 16], 1, 0.0, 0.995, &mut rng).unwrap();
    let alpha = 0.2;

    for horizon in [1usize, 3, 6] {
        let rows = 4;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(100 + horizon as u64);
        let noise: Vec<Mat> = (0..=horizon)
            .map(|_| Mat::from_vec(rows, 1, standard_normals(rows, &mut noise_rng)))
            .collect();
        let seeds = Mat::from_vec(rows, 1, vec![0.2, -0.5, 0.7, -0.1]);
        let states = Mat::zeros(rows, 1);

        let params: BTreeMap<String, Mat> = reference.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let frozen = reference.clone();
        let critic_ref = critic.clone();
        let noise_ref = noise.clone();
        let build = move |tape: &mut Tape, ps: &BTreeMap<String, Mat>| {
            let mut live = frozen.clone();
            let mut store = ParamStore::new();
            for (k, v) in ps {
                store.insert(k, v.clone()).unwrap();
            }
            live.params = store;
            let objective = PolicyObjective {
                live: &live,
                frozen: &frozen,
                q: &critic_ref,
                alpha,
                chain_grad: ChainGrad::FirstStep,
                learn_chains: 1,
            };
            let parts = objective.build(tape, &states, &seeds, &noise_ref)?;
            Ok(parts.loss)
        };
        let report = sspg::diffcore::grad_check(&build, &params, 1e-5, 1e-6).unwrap();
        assert!(
            report.max_rel_err <= 1e-4,
            "horizon {horizon}: rel err {} at {}",
            report.max_rel_err,
            report.worst
        );
    }
}

// ---------------------------------------------------------------------
// AR(1) closed form: for the unsquashed affine kernel with quadratic value,
// the estimator's Monte-Carlo mean must match the analytic gradient of the
// steady-state objective within 3 standard errors.
// ---------------------------------------------------------------------
#[test]
fn ar1_estimator_mean_matches_analytic_steady_state_gradient() {
    // Fixed draws for the five (theta0, theta1, sigma) settings.
    let settings = [
        (0.30, 0.60, 0.40),
        (-0.20, -0.50, 0.30),
        (0.10, 0.85, 0.25),
        (0.50, -0.75, 0.50),
        (-0.40, 0.35, 0.45),
    ];
    let slabs = 50;
    let rows = 2000; // 1e5 draws per setting

    for (idx, &(theta0, theta1, sigma)) in settings.iter().enumerate() {
        let policy = BeliefTransitionPolicy::affine_1d(theta0, theta1, sigma, false);
        let q = QuadraticQ { center: 0.0 };
        let objective = PolicyObjective {
            live: &policy,
            frozen: &policy,
            q: &q,
            alpha: 0.0,
            chain_grad: ChainGrad::FirstStep,
            learn_chains: 1,
        };

        let mu_inf = theta0 / (1.0 - theta1);
        let var_inf = sigma * sigma / (1.0 - theta1 * theta1);
        let expected_d0 = -2.0 * mu_inf / (1.0 - theta1);
        let expected_d1 = -2.0 * (mu_inf * mu_inf / (1.0 - theta1) + var_inf * theta1 / (1.0 - theta1 * theta1));

        // Truncate once the geometric tail is far below sampling error.
        let n_steps = ((-14.0 / theta1.abs().ln()).ceil() as usize).clamp(8, 200);
        let mut rng = ChaCha8Rng::seed_from_u64(900 + idx as u64);
        let states = Mat::zeros(rows, 1);

        let mut slab_g0 = Vec::with_capacity(slabs);
        let mut slab_g1 = Vec::with_capacity(slabs);
        for _ in 0..slabs {
            // Seed actions drawn from the exact steady state.
            let seeds = Mat::from_vec(
                rows,
                1,
                (0..rows)
                    .map(|_| mu_inf + var_inf.sqrt() * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
            let noise: Vec<Mat> = (0..n_steps)
                .map(|_| Mat::from_vec(rows, 1, standard_normals(rows, &mut rng)))
                .collect();
            let mut tape = Tape::new();
            let parts = objective.build(&mut tape, &states, &seeds, &noise).unwrap();
            let grads = tape.backward(parts.loss).unwrap();
            // The estimator of the objective gradient is minus the loss
            // gradient.
            slab_g0.push(-grads["policy/b0"].get(0, 0));
            slab_g1.push(-grads["policy/w0"].get(1, 0));
        }

        let check = |slab: &[f64], expected: f64, name: &str| {
            let mean = slab.iter().sum::<f64>() / slab.len() as f64;
            let var = slab.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (slab.len() - 1) as f64;
            let se = (var / slab.len() as f64).sqrt();
            assert!(
                (mean - expected).abs() <= 3.0 * se,
                "setting {idx} {name}: mean {mean} vs analytic {expected} (se {se})"
            );
        };
        check(&slab_g0, expected_d0, "d/d_theta0");
        check(&slab_g1, expected_d1, "d/d_theta1");
    }
}

// ---------------------------------------------------------------------
// Gradient-stop audits: the policy objective must not touch critic
// parameters, and critic regression must not touch policy parameters.
// ---------------------------------------------------------------------
#[test]
fn gradient_audit_policy_and_critic_are_isolated() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let policy = BeliefTransitionPolicy::new(1, 1, vec![8], &mut rng).unwrap();
    let critic = SoftQEnsemble::new(1, 1, vec![8], 2, 0.75, 0.995, &mut rng).unwrap();

    // Policy side: alpha > 0 exercises the entropy path too.
    let objective = PolicyObjective {
        live: &policy,
        frozen: &policy,
        q: &critic,
        alpha: 0.3,
        chain_grad: ChainGrad::FirstStep,
        learn_chains: 1,
    };
    let noise: Vec<Mat> = (0..3).map(|i| Mat::from_vec(2, 1, vec![0.3 * i as f64, -0.1])).collect();
    let mut tape = Tape::new();
    let parts = objective
        .build(&mut tape, &Mat::zeros(2, 1), &Mat::from_vec(2, 1, vec![0.1, -0.4]), &noise)
        .unwrap();
    let grads = tape.backward(parts.loss).unwrap();
    assert!(grads.keys().all(|k| k.starts_with("policy/")), "critic leaked into policy grads");
    assert!(grads.keys().any(|k| k == "policy/w0"));

    // Critic side: regression graph holds no policy leaves.
    let mut tape = Tape::new();
    let s = tape.constant(Mat::zeros(2, 1));
    let a = tape.constant(Mat::from_vec(2, 1, vec![0.2, -0.2]));
    let nodes = critic.q_eval_on_tape(&mut tape, s, a, false, Binding::Trainable).unwrap();
    let t = tape.constant(Mat::from_vec(2, 1, vec![0.5, -0.5]));
    let err = tape.sub(nodes.aggregate, t).unwrap();
    let sq = tape.mul_elem(err, err).unwrap();
    let loss = tape.mean_all(sq);
    let grads = tape.backward(loss).unwrap();
    assert!(grads.keys().all(|k| k.starts_with('q')), "policy leaked into critic grads");
}

// ---------------------------------------------------------------------
// Vanishing tail: for a well-mixed kernel the per-term gradient norms fade
// with the step index.
// ---------------------------------------------------------------------
#[test]
fn per_term_gradient_norms_vanish_for_well_mixed_kernel() {
    // Weak dependence on the previous belief and a wide noise head mix the
    // chain almost immediately.
    let policy = BeliefTransitionPolicy::affine_1d(0.2, 0.1, 0.9, true);
    let q = QuadraticQ { center: 0.3 };
    let objective = PolicyObjective {
        live: &policy,
        frozen: &policy,
        q: &q,
        alpha: 0.0,
        chain_grad: ChainGrad::FirstStep,
        learn_chains: 1,
    };
    let rows = 512;
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let seeds = Mat::from_vec(rows, 1, (0..rows).map(|_| 0.8 * rng.random_range(-1.0..1.0)).collect());
    let noise: Vec<Mat> = (0..6)
        .map(|_| Mat::from_vec(rows, 1, standard_normals(rows, &mut rng)))
        .collect();
    let mut tape = Tape::new();
    let parts = objective.build(&mut tape, &Mat::zeros(rows, 1), &seeds, &noise).unwrap();
    let norms = per_term_gradient_norms(&mut tape, &parts).unwrap();

    for pair in norms.windows(2) {
        assert!(pair[1] <= pair[0] * 1.05, "per-term norms not fading: {norms:?}");
    }
    assert!(
        norms.last().unwrap() < &(0.1 * norms[0]),
        "tail norm too large: {norms:?}"
    );
}

// ---------------------------------------------------------------------
// Acting on kernels with known dynamics.
// ---------------------------------------------------------------------
fn agent_with_policy(policy: BeliefTransitionPolicy, seed: u64) -> (SspgAgent, RngStreams) {
    let cfg = AgentConfig {
        random_steps: 0,
        hidden: vec![8],
        ..AgentConfig::default()
    };
    let mut streams = RngStreams::from_seed(seed);
    let mut agent = SspgAgent::new(cfg, 1, 1, &mut streams.init).unwrap();
    agent.policy = policy;
    (agent, streams)
}

#[test]
fn contracting_kernel_converges_fast_to_its_fixed_point() {
    // Constant-mean head with the noise head pinned at the clamp floor.
    let mut policy = BeliefTransitionPolicy::affine_1d(0.7, 0.0, 1.0, true);
    policy.log_sigma_min = -5.0;
    policy.log_sigma_max = 2.0;
    {
        let mut pinned = ParamStore::new();
        pinned
            .insert("policy/b0", Mat::from_vec(1, 2, vec![0.7, -20.0]))
            .unwrap();
        policy.params.copy_values_from(&pinned).unwrap();
    }
    let (mut agent, mut streams) = agent_with_policy(policy, 3);
    for _ in 0..10 {
        let (action, stats) = agent.act(&[0.0], &mut streams).unwrap();
        assert!(stats.converged);
        assert!(stats.n_used <= 4, "contraction should converge quickly, used {}", stats.n_used);
        assert!((action[0] - 0.7f64.tanh()).abs() < 0.05, "action {action:?}");
    }
}

#[test]
fn memoryless_kernel_converges_at_small_lengths_with_high_frequency() {
    // Zero dependence on the incoming belief: chains are i.i.d. and mix in
    // one step.
    let policy = BeliefTransitionPolicy::affine_1d(0.0, 0.0, 1.0, true);
    let (mut agent, mut streams) = agent_with_policy(policy, 7);
    let mut converged = 0;
    let mut total_n = 0usize;
    let trials = 200;
    for _ in 0..trials {
        let (action, stats) = agent.act(&[0.0], &mut streams).unwrap();
        assert!(action[0].abs() < 1.0);
        if stats.converged {
            converged += 1;
        }
        total_n += stats.n_used;
    }
    assert!(converged as f64 / trials as f64 >= 0.95, "converged {converged}/{trials}");
    let mean_n = total_n as f64 / trials as f64;
    assert!(mean_n <= 6.0, "mean converged length {mean_n}");
}

// ---------------------------------------------------------------------
// Learning-loop checks on a real bandit.
// ---------------------------------------------------------------------
fn bandit_env(kind: &str) -> Box<dyn sspg::envs::Environment> {
    EnvRegistry::with_defaults()
        .build(&EnvConfig {
            kind: kind.to_string(),
            goals: None,
            radius: 0.35,
            reward_scale: 1.0,
        })
        .unwrap()
}

fn run_training(seed: u64, steps: usize, alpha: f64, zero_reward: bool) -> (SspgAgent, Vec<sspg::agent::LossReport>) {
    let cfg = AgentConfig {
        alpha,
        random_steps: 20,
        min_data: 32,
        batch_size: 32,
        hidden: vec![16, 16],
        ..AgentConfig::default()
    };
    let mut env = bandit_env("bandit-1d");
    let mut streams = RngStreams::from_seed(seed);
    let mut agent = SspgAgent::new(cfg, env.state_dim(), env.action_dim(), &mut streams.init).unwrap();
    let mut reports = Vec::new();
    let mut state = env.reset(&mut streams.env);
    for _ in 0..steps {
        let (action, _) = agent.act(&state, &mut streams).unwrap();
        let outcome = env.step(&action).unwrap();
        agent.record_transition(Transition {
            state: state.clone(),
            action,
            reward: if zero_reward { 0.0 } else { outcome.reward },
            next_state: outcome.next_state.clone(),
            done: outcome.done,
        });
        state = env.reset(&mut streams.env);
        if agent.ready_to_learn() {
            reports.push(agent.learn_step(&mut streams).unwrap());
        }
    }
    (agent, reports)
}

#[test]
fn seeded_training_runs_are_bit_identical() {
    let (_, a) = run_training(42, 60, 0.15, false);
    let (_, b) = run_training(42, 60, 0.15, false);
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b.iter()) {
        assert_eq!(x.policy_loss.to_bits(), y.policy_loss.to_bits());
        assert_eq!(x.critic_loss.to_bits(), y.critic_loss.to_bits());
        assert_eq!(x.n_hat.to_bits(), y.n_hat.to_bits());
    }
}

#[test]
fn zero_reward_environment_drives_critic_to_zero_and_policy_gradient_down() {
    let (agent, reports) = run_training(9, 220, 0.0, true);
    // Critic values shrink toward the all-zero target function.
    let probe = Mat::from_vec(5, 1, vec![-0.8, -0.3, 0.0, 0.4, 0.9]);
    let (_, agg) = agent.critics.q_eval(&Mat::zeros(5, 1), &probe, false).unwrap();
    let max_q = agg.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max_q < 0.15, "critic magnitude {max_q}");
    // Policy loss magnitude settles near zero along with the critic.
    let early: f64 = reports[..10].iter().map(|r| r.policy_loss.abs()).sum::<f64>() / 10.0;
    let late: f64 = reports[reports.len() - 10..].iter().map(|r| r.policy_loss.abs()).sum::<f64>() / 10.0;
    assert!(late < early, "policy loss magnitude went {early} -> {late}");
}

#[test]
fn quadratic_bowl_pulls_the_steady_state_mean_toward_the_goal() {
    // Frozen analytic value function centered at 0.5; only the policy
    // learns. The steady-state mean must move toward the bowl center.
    let goal = 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut policy = BeliefTransitionPolicy::new(1, 1, vec![16, 16], &mut rng).unwrap();
    let q = QuadraticQ { center: goal };

    let ss_mean = |policy: &BeliefTransitionPolicy, rng: &mut ChaCha8Rng| -> f64 {
        let start = sspg::btpolicy::ActionBeliefBatch::uniform(256, 1, rng);
        let chain = policy.simulate_chain(&[0.0], &start, 24, rng).unwrap();
        chain.last().data().iter().sum::<f64>() / 256.0
    };
    let before = ss_mean(&policy, &mut rng);

    let rows = 32;
    for _ in 0..400 {
        let seeds = Mat::from_vec(rows, 1, (0..rows).map(|_| 0.9 * rng.random_range(-1.0f64..1.0)).collect());
        let noise: Vec<Mat> = (0..4)
            .map(|_| Mat::from_vec(rows, 1, standard_normals(rows, &mut rng)))
            .collect();
        let grads = {
            let objective = PolicyObjective {
                live: &policy,
                frozen: &policy,
                q: &q,
                alpha: 0.0,
                chain_grad: ChainGrad::FirstStep,
                learn_chains: 1,
            };
            let mut tape = Tape::new();
            let parts = objective.build(&mut tape, &Mat::zeros(rows, 1), &seeds, &noise).unwrap();
            tape.backward(parts.loss).unwrap()
        };
        policy
            .params
            .adam_step(&grads, 3e-3, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)
            .unwrap();
    }

    let after = ss_mean(&policy, &mut rng);
    assert!(
        (after - goal).abs() < (before - goal).abs(),
        "mean went {before} -> {after}, goal {goal}"
    );
    assert!((after - goal).abs() < 0.15, "final steady-state mean {after}");
}

#[test]
fn horizon_zero_policy_loss_is_supported_for_the_base_case() {
    // One transition only (the degenerate truncation); the objective is the
    // plain one-step reparameterized value.
    let policy = BeliefTransitionPolicy::affine_1d(0.1, 0.3, 0.5, true);
    let q = QuadraticQ { center: 0.0 };
    let objective = PolicyObjective {
        live: &policy,
        frozen: &policy,
        q: &q,
        alpha: 0.0,
        chain_grad: ChainGrad::FirstStep,
        learn_chains: 1,
    };
    let mut tape = Tape::new();
    let noise = vec![Mat::from_vec(1, 1, vec![0.7])];
    let parts = objective
        .build(&mut tape, &Mat::zeros(1, 1), &Mat::from_vec(1, 1, vec![0.2]), &noise)
        .unwrap();
    assert_eq!(parts.chain.len(), 1);
    let a0 = (0.3f64 * 0.2 + 0.1 + 0.5 * 0.7).tanh();
    assert!((tape.value(parts.loss).get(0, 0) - a0 * a0).abs() < 1e-15);
}
