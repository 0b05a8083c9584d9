//! Checkpoint persistence: one JSON document with every parameter tensor
//! (flat arrays plus shapes), the optimizer moments, and the agent scalars.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::SspgAgent;
use crate::diffcore::ParamStore;
use crate::error::{Result, SspgError};

pub const CHECKPOINT_VERSION: &str = "sspg-ckpt-1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub policy: ParamStore,
    pub critics: ParamStore,
    pub critic_targets: ParamStore,
    pub alpha: f64,
    pub n_hat: f64,
    pub env_steps: usize,
    pub learn_steps: usize,
}

impl Checkpoint {
    pub fn from_agent(agent: &SspgAgent) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION.to_string(),
            policy: agent.policy.params.clone(),
            critics: agent.critics.online.clone(),
            critic_targets: agent.critics.delayed.clone(),
            alpha: agent.temperature.alpha(),
            n_hat: agent.convergence.n_hat,
            env_steps: agent.env_steps,
            learn_steps: agent.learn_steps,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| SspgError::Checkpoint(format!("serialize failed: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&raw)
            .map_err(|e| SspgError::Checkpoint(format!("{}: parse failed: {e}", path.display())))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(SspgError::Checkpoint(format!(
                "version mismatch: file has {:?}, this build reads {:?}",
                ckpt.version, CHECKPOINT_VERSION
            )));
        }
        Ok(ckpt)
    }

    /// Install the checkpoint into an agent built from the same config.
    /// Parameter names and shapes must line up exactly.
    pub fn apply_to(&self, agent: &mut SspgAgent) -> Result<()> {
        agent
            .policy
            .params
            .compatible_with(&self.policy)
            .map_err(|e| SspgError::Checkpoint(format!("policy params: {e}")))?;
        agent
            .critics
            .online
            .compatible_with(&self.critics)
            .map_err(|e| SspgError::Checkpoint(format!("critic params: {e}")))?;
        agent
            .critics
            .delayed
            .compatible_with(&self.critic_targets)
            .map_err(|e| SspgError::Checkpoint(format!("critic targets: {e}")))?;
        agent.policy.params = self.policy.clone();
        agent.critics.online = self.critics.clone();
        agent.critics.delayed = self.critic_targets.clone();
        agent.temperature.set_alpha(self.alpha);
        agent.convergence.n_hat = self.n_hat.max(1.0);
        agent.env_steps = self.env_steps;
        agent.learn_steps = self.learn_steps;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::AgentConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_agent(seed: u64) -> SspgAgent {
        let cfg = AgentConfig {
            hidden: vec![4],
            ..AgentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SspgAgent::new(cfg, 1, 1, &mut rng).unwrap()
    }

    #[test]
    fn round_trip_restores_parameters_and_scalars() {
        let dir = std::env::temp_dir().join("sspg-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.json");

        let mut agent = tiny_agent(1);
        agent.convergence.n_hat = 5.25;
        agent.env_steps = 321;
        let ckpt = Checkpoint::from_agent(&agent);
        ckpt.save(&path).unwrap();

        let loaded = Checkpoint::load(&path).unwrap();
        let mut fresh = tiny_agent(99);
        loaded.apply_to(&mut fresh).unwrap();
        assert_eq!(fresh.convergence.n_hat, 5.25);
        assert_eq!(fresh.env_steps, 321);
        for (name, p) in agent.policy.params.iter() {
            assert_eq!(p, fresh.policy.params.get(name).unwrap());
        }
    }

    #[test]
    fn version_mismatch_is_an_explicit_error() {
        let dir = std::env::temp_dir().join("sspg-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("badversion.json");
        let agent = tiny_agent(2);
        let mut ckpt = Checkpoint::from_agent(&agent);
        ckpt.version = "sspg-ckpt-0".to_string();
        let json = serde_json::to_string(&ckpt).unwrap();
        std::fs::write(&path, json).unwrap();
        match Checkpoint::load(&path) {
            Err(SspgError::Checkpoint(msg)) => assert!(msg.contains("version mismatch")),
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let agent = tiny_agent(3);
        let ckpt = Checkpoint::from_agent(&agent);
        let cfg = AgentConfig {
            hidden: vec![8],
            ..AgentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut other = SspgAgent::new(cfg, 1, 1, &mut rng).unwrap();
        assert!(matches!(ckpt.apply_to(&mut other), Err(SspgError::Checkpoint(_))));
    }
}
