//! Desk-scale environments behind a name-keyed registry.
//!
//! Every environment implements [`Environment`]; concrete variants are
//! registered under a kind string and built from the `[environment]` config
//! section, so runs select them at runtime by name. All environments expose
//! actions on the canonical cube `[-1, 1]^d` and map to native ranges
//! internally.

pub mod bandit;
pub mod oracle;

pub use bandit::PositionalBandit;
pub use oracle::{goal_visit_frequencies, histogram, tv_distance, CanonicalOracle};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SspgError};

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

pub trait Environment {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64>;
    /// Apply a cube action.
    fn step(&mut self, action: &[f64]) -> Result<StepOutcome>;

    /// Ground-truth immediate reward of a cube action, when the environment
    /// has one (single-step tasks). Canonical-distribution oracles build on
    /// this.
    fn reward_at(&self, _action: &[f64]) -> Option<f64> {
        None
    }

    /// Goal coordinates for goal-based tasks.
    fn goals(&self) -> Option<&[Vec<f64>]> {
        None
    }

    /// Assignment radius around each goal.
    fn goal_radius(&self) -> Option<f64> {
        None
    }
}

/// `[environment]` section of a run config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    /// Registry key selecting the environment variant.
    pub kind: String,
    /// Goal coordinates for the custom bandit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goals: Option<Vec<Vec<f64>>>,
    /// Goal-assignment radius.
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_reward_scale")]
    pub reward_scale: f64,
}

fn default_radius() -> f64 {
    0.35
}

fn default_reward_scale() -> f64 {
    1.0
}

type EnvBuilder = fn(&EnvConfig) -> Result<Box<dyn Environment>>;

struct EnvEntry {
    kind: &'static str,
    summary: &'static str,
    build: EnvBuilder,
}

/// Name-keyed registry of environment builders.
pub struct EnvRegistry {
    entries: Vec<EnvEntry>,
}

impl Default for EnvRegistry {
    fn default() -> Self {
        Self::with_defaults()
    }
}

/// Goals equally spaced on a circle of radius 0.6, starting from the top.
fn circle_goals(count: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|k| {
            let angle = std::f64::consts::FRAC_PI_2 + 2.0 * std::f64::consts::PI * k as f64 / count as f64;
            vec![0.6 * angle.cos(), 0.6 * angle.sin()]
        })
        .collect()
}

fn build_circle_bandit(count: usize, name: &str, cfg: &EnvConfig) -> Result<Box<dyn Environment>> {
    Ok(Box::new(PositionalBandit::new(
        name.to_string(),
        circle_goals(count),
        cfg.radius,
        cfg.reward_scale,
    )?))
}

impl EnvRegistry {
    pub fn with_defaults() -> Self {
        let entries: Vec<EnvEntry> = vec![
            EnvEntry {
                kind: "bandit-1d",
                summary: "one-dimensional positional bandit with goals at -0.55 and 0.55",
                build: |cfg| {
                    Ok(Box::new(PositionalBandit::new(
                        "bandit-1d".to_string(),
                        vec![vec![-0.55], vec![0.55]],
                        cfg.radius,
                        cfg.reward_scale,
                    )?))
                },
            },
            EnvEntry {
                kind: "bandit-1goal",
                summary: "planar positional bandit, single goal",
                build: |cfg| build_circle_bandit(1, "bandit-1goal", cfg),
            },
            EnvEntry {
                kind: "bandit-2goal",
                summary: "planar positional bandit, two opposed goals",
                build: |cfg| build_circle_bandit(2, "bandit-2goal", cfg),
            },
            EnvEntry {
                kind: "bandit-3goal",
                summary: "planar positional bandit, three goals on a circle",
                build: |cfg| build_circle_bandit(3, "bandit-3goal", cfg),
            },
            EnvEntry {
                kind: "bandit-4goal",
                summary: "planar positional bandit, four goals on a circle",
                build: |cfg| build_circle_bandit(4, "bandit-4goal", cfg),
            },
            EnvEntry {
                kind: "bandit-custom",
                summary: "positional bandit with goal coordinates from the config",
                build: |cfg| {
                    let goals = cfg.goals.clone().ok_or_else(|| {
                        SspgError::Config("environment.goals is required for kind \"bandit-custom\"".into())
                    })?;
                    Ok(Box::new(PositionalBandit::new(
                        "bandit-custom".to_string(),
                        goals,
                        cfg.radius,
                        cfg.reward_scale,
                    )?))
                },
            },
        ];
        EnvRegistry { entries }
    }

    pub fn kinds(&self) -> Vec<(&'static str, &'static str)> {
        self.entries.iter().map(|e| (e.kind, e.summary)).collect()
    }

    pub fn build(&self, cfg: &EnvConfig) -> Result<Box<dyn Environment>> {
        match self.entries.iter().find(|e| e.kind == cfg.kind) {
            Some(entry) => (entry.build)(cfg),
            None => {
                let known: Vec<&str> = self.entries.iter().map(|e| e.kind).collect();
                Err(SspgError::Config(format!(
                    "unknown environment.kind {:?}; known kinds: {}",
                    cfg.kind,
                    known.join(", ")
                )))
            }
        }
    }
}
