//! SSPG: maximum-entropy reinforcement learning where the agent's behavior
//! is the steady-state distribution of a reasoning Markov chain.
//!
//! Instead of a feed-forward policy, the agent keeps a batch of action
//! beliefs and repeatedly updates them with a learned belief-transition
//! kernel until a multivariate scale-reduction diagnostic says the batch has
//! reached steady state; the action is drawn from the converged batch. The
//! kernel is trained off-policy with a truncated steady-state policy
//! gradient against a soft Q ensemble.
//!
//! Modules:
//! - [`diffcore`]: matrices, reverse-mode tape, dense layers, Adam.
//! - [`btpolicy`]: squashed-Gaussian transition kernel and chain simulation.
//! - [`grdiag`]: within/between covariances, scale-reduction factor,
//!   backtracking convergence search.
//! - [`critic`]: soft Q ensemble with delayed copies.
//! - [`agent`]: acting, learning, replay, short-term action memory.
//! - [`envs`]: desk-scale environments with closed-form oracles.
//! - [`cli`]: train/eval/analyze entry points and run artifacts.

pub mod agent;
pub mod btpolicy;
pub mod cli;
pub mod config;
pub mod critic;
pub mod diffcore;
pub mod envs;
pub mod error;
pub mod grdiag;
pub mod rng;

pub use error::{Result, SspgError};
