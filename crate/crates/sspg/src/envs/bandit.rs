//! Positional bandits: single-step episodes on a bounded box where the
//! reward is the negative distance to the nearest goal. The observation is
//! a constant token (single-state task), so everything interesting lives in
//! the action distribution.

use rand::RngCore;

use crate::envs::{Environment, StepOutcome};
use crate::error::{Result, SspgError};

#[derive(Debug, Clone)]
pub struct PositionalBandit {
    name: String,
    goals: Vec<Vec<f64>>,
    dim: usize,
    radius: f64,
    reward_scale: f64,
    clip_warned: bool,
}

impl PositionalBandit {
    pub fn new(name: String, goals: Vec<Vec<f64>>, radius: f64, reward_scale: f64) -> Result<Self> {
        if goals.is_empty() {
            return Err(SspgError::Config(format!("{name}: at least one goal is required")));
        }
        let dim = goals[0].len();
        if dim == 0 {
            return Err(SspgError::Config(format!("{name}: goals must have at least one coordinate")));
        }
        for g in &goals {
            if g.len() != dim {
                return Err(SspgError::Config(format!("{name}: goal dimensions are ragged")));
            }
            if g.iter().any(|v| v.abs() > 1.0) {
                return Err(SspgError::Config(format!("{name}: goal {g:?} lies outside the box")));
            }
        }
        if !(radius > 0.0) {
            return Err(SspgError::Config(format!("{name}: radius must be positive")));
        }
        Ok(PositionalBandit {
            name,
            goals,
            dim,
            radius,
            reward_scale,
            clip_warned: false,
        })
    }

    pub fn nearest_goal(&self, point: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, g) in self.goals.iter().enumerate() {
            let d = g
                .iter()
                .zip(point.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    pub fn reward(&self, action: &[f64]) -> f64 {
        -self.reward_scale * self.nearest_goal(action).1
    }
}

impl Environment for PositionalBandit {
    fn name(&self) -> &str {
        &self.name
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn action_dim(&self) -> usize {
        self.dim
    }

    fn reset(&mut self, _rng: &mut dyn RngCore) -> Vec<f64> {
        vec![0.0]
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if action.len() != self.dim {
            return Err(SspgError::dimension(
                "bandit step",
                format!("{}", self.dim),
                format!("{}", action.len()),
            ));
        }
        let mut a = action.to_vec();
        if a.iter().any(|v| v.abs() > 1.0) {
            if !self.clip_warned {
                eprintln!("warning: {}: action {a:?} outside the box, clipping", self.name);
                self.clip_warned = true;
            }
            for v in &mut a {
                *v = v.clamp(-1.0, 1.0);
            }
        }
        Ok(StepOutcome {
            next_state: vec![0.0],
            reward: self.reward(&a),
            done: true,
        })
    }

    fn reward_at(&self, action: &[f64]) -> Option<f64> {
        Some(self.reward(action))
    }

    fn goals(&self) -> Option<&[Vec<f64>]> {
        Some(&self.goals)
    }

    fn goal_radius(&self) -> Option<f64> {
        Some(self.radius)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_goal_1d() -> PositionalBandit {
        PositionalBandit::new(
            "test".to_string(),
            vec![vec![-0.5], vec![0.5]],
            0.3,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn reward_is_zero_exactly_on_a_goal() {
        let mut env = two_goal_1d();
        let out = env.step(&[0.5]).unwrap();
        assert_eq!(out.reward, 0.0);
        assert!(out.done);
    }

    #[test]
    fn midpoint_reward_is_minus_half() {
        let env = two_goal_1d();
        assert!((env.reward(&[0.0]) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn reward_is_invariant_to_goal_permutation() {
        let a = PositionalBandit::new("a".into(), vec![vec![-0.5], vec![0.5]], 0.3, 1.0).unwrap();
        let b = PositionalBandit::new("b".into(), vec![vec![0.5], vec![-0.5]], 0.3, 1.0).unwrap();
        for x in [-0.9, -0.2, 0.0, 0.3, 0.8] {
            assert_eq!(a.reward(&[x]), b.reward(&[x]));
        }
    }

    #[test]
    fn out_of_box_actions_are_clipped() {
        let mut env = two_goal_1d();
        let clipped = env.step(&[1.7]).unwrap();
        let boundary = env.step(&[1.0]).unwrap();
        assert_eq!(clipped.reward, boundary.reward);
    }

    #[test]
    fn episodes_are_single_step() {
        let mut env = two_goal_1d();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = env.reset(&mut rng);
        assert_eq!(s, vec![0.0]);
        assert!(env.step(&[0.1]).unwrap().done);
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(PositionalBandit::new("x".into(), vec![], 0.3, 1.0).is_err());
        assert!(PositionalBandit::new("x".into(), vec![vec![1.4]], 0.3, 1.0).is_err());
        assert!(PositionalBandit::new("x".into(), vec![vec![0.1], vec![0.1, 0.2]], 0.3, 1.0).is_err());
    }
}
