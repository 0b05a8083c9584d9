//! Ground-truth distribution oracles for desk-scale validation: the
//! canonical distribution of a value function, histogram/total-variation
//! helpers, and goal-visit statistics.

use crate::error::{Result, SspgError};

/// Canonical distribution `p(a) ∝ exp(Q(a) / alpha)` on a uniform 1-D grid
/// over [-1, 1], normalized by trapezoid quadrature. Exponentiation is
/// max-shifted, so arbitrarily scaled value functions cannot overflow.
#[derive(Debug, Clone)]
pub struct CanonicalOracle {
    pub grid_points: usize,
    pub alpha: f64,
}

impl CanonicalOracle {
    pub fn new(grid_points: usize, alpha: f64) -> Result<Self> {
        if grid_points < 3 {
            return Err(SspgError::Contract("canonical oracle needs at least 3 grid points".into()));
        }
        if !(alpha > 0.0) {
            return Err(SspgError::Contract(format!("temperature must be positive, got {alpha}")));
        }
        Ok(CanonicalOracle { grid_points, alpha })
    }

    pub fn grid(&self) -> Vec<f64> {
        let n = self.grid_points;
        (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect()
    }

    /// Normalized density values on the grid.
    pub fn density(&self, q: &dyn Fn(f64) -> f64) -> (Vec<f64>, Vec<f64>) {
        let grid = self.grid();
        let scores: Vec<f64> = grid.iter().map(|&a| q(a) / self.alpha).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let h = 2.0 / (self.grid_points - 1) as f64;
        let mut z = 0.0;
        for i in 0..self.grid_points {
            let w = if i == 0 || i == self.grid_points - 1 { 0.5 } else { 1.0 };
            z += w * unnorm[i] * h;
        }
        let density = unnorm.iter().map(|u| u / z).collect();
        (grid, density)
    }

    /// Probability mass per bin for a uniform `bins`-bin partition of
    /// [-1, 1], integrating the canonical density with the trapezoid rule
    /// inside each bin. Masses sum to 1 up to quadrature error.
    pub fn bin_masses(&self, q: &dyn Fn(f64) -> f64, bins: usize) -> Vec<f64> {
        let (grid, density) = self.density(q);
        let h = 2.0 / (self.grid_points - 1) as f64;
        let mut masses = vec![0.0; bins];
        for i in 0..self.grid_points - 1 {
            // Trapezoid panel between grid[i] and grid[i+1], assigned to the
            // bin holding its midpoint.
            let mid = 0.5 * (grid[i] + grid[i + 1]);
            let panel = 0.5 * (density[i] + density[i + 1]) * h;
            let b = (((mid + 1.0) / 2.0) * bins as f64) as usize;
            masses[b.min(bins - 1)] += panel;
        }
        masses
    }
}

/// Normalized histogram masses of samples over a uniform partition of
/// [lo, hi]; samples outside land in the edge bins.
pub fn histogram(samples: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<f64> {
    assert!(bins > 0 && hi > lo);
    let mut h = vec![0.0; bins];
    if samples.is_empty() {
        return h;
    }
    for &x in samples {
        let t = (x - lo) / (hi - lo);
        let b = ((t * bins as f64) as isize).clamp(0, bins as isize - 1) as usize;
        h[b] += 1.0;
    }
    let n = samples.len() as f64;
    for v in &mut h {
        *v /= n;
    }
    h
}

/// Total-variation distance between two probability-mass vectors.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    0.5 * p.iter().zip(q.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Per-goal visit frequencies: each action is assigned to its nearest goal
/// when it lies within `radius`, everything else counts toward the returned
/// out-of-radius mass. Frequencies are normalized over all actions.
pub fn goal_visit_frequencies(actions: &[Vec<f64>], goals: &[Vec<f64>], radius: f64) -> (Vec<f64>, f64) {
    assert!(!actions.is_empty(), "goal_visit_frequencies needs at least one action");
    let mut counts = vec![0usize; goals.len()];
    let mut out = 0usize;
    for a in actions {
        let (mut best, mut dist) = (0usize, f64::INFINITY);
        for (i, g) in goals.iter().enumerate() {
            let d = g
                .iter()
                .zip(a.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            if d < dist {
                best = i;
                dist = d;
            }
        }
        if dist <= radius {
            counts[best] += 1;
        } else {
            out += 1;
        }
    }
    let n = actions.len() as f64;
    (counts.iter().map(|&c| c as f64 / n).collect(), out as f64 / n)
}
