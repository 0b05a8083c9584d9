//! Run configuration: a TOML file with `[run]`, `[environment]`, and
//! `[agent]` sections. Parsing fills every default; the fully resolved
//! config is echoed to the run directory so a run can be reproduced from
//! its artifacts alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::envs::EnvConfig;
use crate::error::{Result, SspgError};

fn default_eval_episodes() -> usize {
    1000
}

fn default_checkpoint_every() -> usize {
    500
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub total_steps: usize,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    /// Periodic checkpoint cadence in environment steps; a final checkpoint
    /// is always written.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub environment: EnvConfig,
    #[serde(default)]
    pub agent: AgentConfig,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| SspgError::Config(format!("{origin}: {e}")))?;
        cfg.agent.validate()?;
        if cfg.run.total_steps == 0 {
            return Err(SspgError::Config(format!("{origin}: run.total_steps must be positive")));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SspgError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Fully explicit TOML echo of the resolved configuration.
    pub fn to_resolved_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| SspgError::Config(format!("config echo failed: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[run]
seed = 7
total_steps = 100

[environment]
kind = "bandit-1d"
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = RunConfig::parse(MINIMAL, "test").unwrap();
        assert_eq!(cfg.run.seed, 7);
        assert_eq!(cfg.agent.initial_beliefs, 64);
        assert_eq!(cfg.agent.psrf_threshold, 1.1);
        assert_eq!(cfg.environment.kind, "bandit-1d");
    }

    #[test]
    fn missing_environment_key_names_it() {
        let err = RunConfig::parse("[run]\nseed = 1\ntotal_steps = 10\n", "test").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("environment"), "{msg}");
    }

    #[test]
    fn missing_kind_names_the_field() {
        let err = RunConfig::parse("[run]\nseed = 1\ntotal_steps = 10\n[environment]\nradius = 0.4\n", "test")
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("kind"), "{msg}");
    }

    #[test]
    fn unknown_agent_field_is_rejected() {
        let text = format!("{MINIMAL}\n[agent]\nmystery_knob = 3\n");
        let err = RunConfig::parse(&text, "test").unwrap_err();
        assert!(err.to_string().contains("mystery_knob"));
    }

    #[test]
    fn resolved_echo_reparses_identically() {
        let cfg = RunConfig::parse(MINIMAL, "test").unwrap();
        let echo = cfg.to_resolved_toml().unwrap();
        // Every default is explicit in the echo.
        assert!(echo.contains("initial_beliefs = 64"));
        assert!(echo.contains("psrf_threshold = 1.1"));
        let back = RunConfig::parse(&echo, "echo").unwrap();
        assert_eq!(back.agent.batch_size, cfg.agent.batch_size);
        assert_eq!(back.run.seed, cfg.run.seed);
    }
}
