//! Entropy temperature, fixed or tuned by dual descent.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemperatureMode {
    #[default]
    Fixed,
    Auto,
}

/// Temperature alpha kept positive through a log parameterization. In auto
/// mode each update nudges log(alpha) so the policy's entropy tracks the
/// target: entropy above target shrinks alpha, below target grows it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Temperature {
    log_alpha: f64,
    pub mode: TemperatureMode,
    pub target_entropy: f64,
    pub lr: f64,
}

impl Temperature {
    pub fn fixed(alpha: f64) -> Self {
        assert!(alpha >= 0.0, "alpha must be nonnegative");
        Temperature {
            // Fixed alpha = 0 is allowed (pure reward maximization); park
            // the log at a harmless floor in that case.
            log_alpha: if alpha > 0.0 { alpha.ln() } else { f64::NEG_INFINITY },
            mode: TemperatureMode::Fixed,
            target_entropy: 0.0,
            lr: 0.0,
        }
    }

    pub fn auto(alpha0: f64, target_entropy: f64, lr: f64) -> Self {
        assert!(alpha0 > 0.0, "initial alpha must be positive");
        Temperature {
            log_alpha: alpha0.ln(),
            mode: TemperatureMode::Auto,
            target_entropy,
            lr,
        }
    }

    pub fn alpha(&self) -> f64 {
        if self.log_alpha == f64::NEG_INFINITY {
            0.0
        } else {
            self.log_alpha.exp()
        }
    }

    pub fn set_alpha(&mut self, alpha: f64) {
        self.log_alpha = if alpha > 0.0 { alpha.ln() } else { f64::NEG_INFINITY };
    }

    /// Dual step from the mean log-density of current behavior samples.
    pub fn update(&mut self, mean_log_pi: f64) {
        if self.mode == TemperatureMode::Fixed {
            return;
        }
        // Entropy estimate is -mean_log_pi; positive excess lowers alpha.
        let excess = -mean_log_pi - self.target_entropy;
        self.log_alpha -= self.lr * excess;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_mode_never_moves() {
        let mut t = Temperature::fixed(0.2);
        t.update(-5.0);
        t.update(5.0);
        assert_eq!(t.alpha(), 0.2);
    }

    #[test]
    fn entropy_above_target_lowers_alpha() {
        let mut t = Temperature::auto(1.0, 1.0, 0.1);
        // mean_log_pi = -3 => entropy 3 > target 1.
        t.update(-3.0);
        assert!(t.alpha() < 1.0);
    }

    #[test]
    fn entropy_below_target_raises_alpha() {
        let mut t = Temperature::auto(1.0, 1.0, 0.1);
        t.update(0.5);
        assert!(t.alpha() > 1.0);
    }

    #[test]
    fn stationary_at_the_target() {
        let mut t = Temperature::auto(0.7, 2.0, 0.1);
        t.update(-2.0);
        assert!((t.alpha() - 0.7).abs() < 1e-15);
    }
}
