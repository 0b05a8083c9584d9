//! Multivariate Gelman-Rubin diagnostics over reasoning chains.
//!
//! Convergence of the belief batch is judged by comparing two covariance
//! estimates of the unknown steady-state distribution: the average sample
//! covariance *within* each parallel chain (W) and the covariance *between*
//! the chain means (B). The pseudo scale-reduction factor
//!
//! ```text
//! R^p = sqrt((N-1)/N + lambda_max(W^{-1} B))
//! ```
//!
//! approaches 1 as every chain explores the same distribution; `R^p < 1.1`
//! is the conventional stopping rule. The largest eigenvalue is computed
//! from the symmetric generalized problem `B x = lambda W x` via a Cholesky
//! factor of the regularized W, never by forming the nonsymmetric product.

use serde::{Deserialize, Serialize};

use crate::btpolicy::ChainHistory;
use crate::diffcore::Mat;
use crate::error::{Result, SspgError};

/// Ridge added to W before factorization. Exact singularity past this is
/// reported as an error rather than silently regularized through.
const W_RIDGE: f64 = 1e-10;

/// Diagonal entries at or below this are treated as genuinely degenerate.
const DEGENERATE_FLOOR: f64 = 1e-30;

/// Which scale-reduction formula to use. `Paper` is the plain
/// `sqrt((N-1)/N + lambda_max)`; `BrooksGelman` additionally scales
/// `lambda_max` by `(M+1)/M` as in the multivariate original.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PsrfVariant {
    #[default]
    Paper,
    BrooksGelman,
}

#[derive(Debug, Clone)]
pub struct PsrfReport {
    pub within: Mat,
    pub between: Mat,
    pub lambda_max: f64,
    pub r_p: f64,
    pub n_steps: usize,
    pub m_chains: usize,
}

/// Running state of the adaptive step budget: an exponential moving average
/// of converged chain lengths plus the stopping rule's parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceState {
    pub n_hat: f64,
    pub rho: f64,
    pub threshold: f64,
    pub n_max: usize,
}

impl ConvergenceState {
    pub fn new(n_hat: f64, rho: f64, threshold: f64, n_max: usize) -> Result<Self> {
        if !(n_hat >= 1.0) {
            return Err(SspgError::Contract(format!("n_hat must be >= 1, got {n_hat}")));
        }
        if !(0.0..1.0).contains(&rho) {
            return Err(SspgError::Contract(format!("rho must be in [0, 1), got {rho}")));
        }
        if !(threshold > 1.0) {
            return Err(SspgError::Contract(format!("threshold must exceed 1, got {threshold}")));
        }
        Ok(ConvergenceState {
            n_hat,
            rho,
            threshold,
            n_max,
        })
    }
}

/// Exponential moving average of converged lengths:
/// `n_hat <- rho * n_hat + (1 - rho) * n`.
pub fn update_running_steps(state: &mut ConvergenceState, n: usize) {
    debug_assert!(n >= 1);
    state.n_hat = state.rho * state.n_hat + (1.0 - state.rho) * n as f64;
}

fn chain_mean(chain: &ChainHistory, m: usize, n_steps: usize) -> Vec<f64> {
    let d = chain.dim();
    let mut mean = vec![0.0; d];
    for n in 1..=n_steps {
        for (j, acc) in mean.iter_mut().enumerate() {
            *acc += chain.step(n).get(m, j);
        }
    }
    for acc in &mut mean {
        *acc /= n_steps as f64;
    }
    mean
}

fn within_covariance_prefix(chain: &ChainHistory, n_steps: usize) -> Result<Mat> {
    if n_steps < 2 {
        return Err(SspgError::InsufficientSamples {
            needed: 2,
            got: n_steps,
        });
    }
    let (m_chains, d) = (chain.chains(), chain.dim());
    let mut w = Mat::zeros(d, d);
    for m in 0..m_chains {
        let mean = chain_mean(chain, m, n_steps);
        for n in 1..=n_steps {
            let row = chain.step(n).row(m);
            for i in 0..d {
                let di = row[i] - mean[i];
                for j in 0..d {
                    let dj = row[j] - mean[j];
                    w.set(i, j, w.get(i, j) + di * dj);
                }
            }
        }
    }
    // Unbiased per-chain covariance, averaged over chains.
    let scale = 1.0 / ((n_steps as f64 - 1.0) * m_chains as f64);
    Ok(w.map(|v| v * scale))
}

fn between_covariance_prefix(chain: &ChainHistory, n_steps: usize) -> Result<Mat> {
    let (m_chains, d) = (chain.chains(), chain.dim());
    if m_chains < 2 {
        return Err(SspgError::InsufficientChains {
            needed: 2,
            got: m_chains,
        });
    }
    if n_steps < 1 {
        return Err(SspgError::InsufficientSamples { needed: 1, got: 0 });
    }
    let means: Vec<Vec<f64>> = (0..m_chains).map(|m| chain_mean(chain, m, n_steps)).collect();
    let mut grand = vec![0.0; d];
    for mean in &means {
        for (g, &v) in grand.iter_mut().zip(mean.iter()) {
            *g += v;
        }
    }
    for g in &mut grand {
        *g /= m_chains as f64;
    }
    let mut b = Mat::zeros(d, d);
    for mean in &means {
        for i in 0..d {
            let di = mean[i] - grand[i];
            for j in 0..d {
                let dj = mean[j] - grand[j];
                b.set(i, j, b.get(i, j) + di * dj);
            }
        }
    }
    let scale = 1.0 / (m_chains as f64 - 1.0);
    Ok(b.map(|v| v * scale))
}

/// Average within-chain sample covariance over the full chain.
pub fn within_covariance(chain: &ChainHistory) -> Result<Mat> {
    within_covariance_prefix(chain, chain.len())
}

/// Covariance of the per-chain means around the grand mean.
pub fn between_covariance(chain: &ChainHistory) -> Result<Mat> {
    between_covariance_prefix(chain, chain.len())
}

fn cholesky(a: &Mat) -> std::result::Result<Mat, Vec<usize>> {
    let d = a.rows();
    let mut l = Mat::zeros(d, d);
    let mut bad = Vec::new();
    for i in 0..d {
        for j in 0..=i {
            let mut sum = a.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum > 0.0 && sum.is_finite() {
                    l.set(i, i, sum.sqrt());
                } else {
                    bad.push(i);
                    l.set(i, i, f64::NAN);
                }
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    if bad.is_empty() {
        Ok(l)
    } else {
        Err(bad)
    }
}

/// Solve L x = b for lower-triangular L, overwriting b.
fn forward_solve(l: &Mat, b: &mut [f64]) {
    let d = l.rows();
    for i in 0..d {
        let mut v = b[i];
        for k in 0..i {
            v -= l.get(i, k) * b[k];
        }
        b[i] = v / l.get(i, i);
    }
}

/// Largest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
fn sym_eigen_max(mut a: Mat) -> f64 {
    let d = a.rows();
    if d == 1 {
        return a.get(0, 0);
    }
    let scale = 1.0 + (0..d).map(|i| a.get(i, i).abs()).fold(0.0, f64::max);
    for _ in 0..200 {
        let mut off = 0.0;
        let (mut p, mut q) = (0, 1);
        for i in 0..d {
            for j in (i + 1)..d {
                if a.get(i, j).abs() > off {
                    off = a.get(i, j).abs();
                    p = i;
                    q = j;
                }
            }
        }
        if off <= 1e-16 * scale {
            break;
        }
        let apq = a.get(p, q);
        let theta = 0.5 * (a.get(q, q) - a.get(p, p)) / apq;
        let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
        let c = 1.0 / (t * t + 1.0).sqrt();
        let s = t * c;
        for k in 0..d {
            let akp = a.get(k, p);
            let akq = a.get(k, q);
            a.set(k, p, c * akp - s * akq);
            a.set(k, q, s * akp + c * akq);
        }
        for k in 0..d {
            let apk = a.get(p, k);
            let aqk = a.get(q, k);
            a.set(p, k, c * apk - s * aqk);
            a.set(q, k, s * apk + c * aqk);
        }
    }
    (0..d).map(|i| a.get(i, i)).fold(f64::NEG_INFINITY, f64::max)
}

fn psrf_prefix(chain: &ChainHistory, n_steps: usize, variant: PsrfVariant) -> Result<PsrfReport> {
    let w = within_covariance_prefix(chain, n_steps)?;
    let b = between_covariance_prefix(chain, n_steps)?;
    let d = w.rows();

    let degenerate: Vec<usize> = (0..d).filter(|&j| w.get(j, j) <= DEGENERATE_FLOOR).collect();
    if !degenerate.is_empty() {
        return Err(SspgError::DegenerateCovariance { dims: degenerate });
    }
    // Factor W as-is when it is healthy (keeps the hand-checkable values
    // exact); fall back to a small ridge when it is near-singular, and
    // treat singularity beyond the ridge as a real error.
    let l = match cholesky(&w) {
        Ok(l) => l,
        Err(_) => {
            let mut w_reg = w.clone();
            for j in 0..d {
                w_reg.set(j, j, w_reg.get(j, j) + W_RIDGE);
            }
            cholesky(&w_reg).map_err(|dims| SspgError::DegenerateCovariance { dims })?
        }
    };

    // C = L^{-1} B L^{-T} shares eigenvalues with W^{-1} B and is symmetric.
    let mut y = Mat::zeros(d, d);
    for col in 0..d {
        let mut v: Vec<f64> = (0..d).map(|r| b.get(r, col)).collect();
        forward_solve(&l, &mut v);
        for r in 0..d {
            y.set(r, col, v[r]);
        }
    }
    let mut c = Mat::zeros(d, d);
    for col in 0..d {
        let mut v: Vec<f64> = (0..d).map(|r| y.get(col, r)).collect();
        forward_solve(&l, &mut v);
        for r in 0..d {
            c.set(col, r, v[r]);
        }
    }
    // Symmetrize away factorization round-off.
    for i in 0..d {
        for j in (i + 1)..d {
            let avg = 0.5 * (c.get(i, j) + c.get(j, i));
            c.set(i, j, avg);
            c.set(j, i, avg);
        }
    }

    let mut lambda_max = sym_eigen_max(c);
    if let PsrfVariant::BrooksGelman = variant {
        lambda_max *= (chain.chains() as f64 + 1.0) / chain.chains() as f64;
    }
    let n = n_steps as f64;
    let r_p = ((n - 1.0) / n + lambda_max).sqrt();
    if !r_p.is_finite() {
        return Err(SspgError::non_finite(
            "psrf",
            format!("lambda_max = {lambda_max} over {n_steps} steps"),
        ));
    }
    Ok(PsrfReport {
        within: w,
        between: b,
        lambda_max,
        r_p,
        n_steps,
        m_chains: chain.chains(),
    })
}

/// Scale-reduction factor over the full chain.
pub fn psrf(chain: &ChainHistory) -> Result<PsrfReport> {
    psrf_prefix(chain, chain.len(), PsrfVariant::Paper)
}

/// Scale-reduction factor over the first `n_steps` steps.
pub fn psrf_at(chain: &ChainHistory, n_steps: usize, variant: PsrfVariant) -> Result<PsrfReport> {
    psrf_prefix(chain, n_steps, variant)
}

/// Backtracking search for the shortest prefix that still satisfies the
/// threshold. Returns `None` when even the full chain fails. Walking down
/// from the full length keeps the result consistent with the stopping rule:
/// the returned prefix passes and the one below it fails (or is 2).
pub fn min_converged_length(
    chain: &ChainHistory,
    state: &ConvergenceState,
    variant: PsrfVariant,
) -> Result<Option<usize>> {
    let full = chain.len();
    if full < 2 {
        return Err(SspgError::InsufficientSamples { needed: 2, got: full });
    }
    if psrf_prefix(chain, full, variant)?.r_p >= state.threshold {
        return Ok(None);
    }
    let mut best = full;
    for n in (2..full).rev() {
        if psrf_prefix(chain, n, variant)?.r_p < state.threshold {
            best = n;
        } else {
            break;
        }
    }
    Ok(Some(best))
}
