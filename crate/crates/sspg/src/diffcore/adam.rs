//! Named parameter tensors with Adam state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::mat::Mat;
use crate::error::{Result, SspgError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Parameter tensors keyed by name, plus per-parameter first/second Adam
/// moments and a shared step counter. The map is ordered so that iteration
/// (and therefore every update) is deterministic.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Mat>,
    m: BTreeMap<String, Mat>,
    v: BTreeMap<String, Mat>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Mat) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(SspgError::Contract(format!("duplicate parameter {name}")));
        }
        self.m.insert(name.to_string(), Mat::zeros(value.rows(), value.cols()));
        self.v.insert(name.to_string(), Mat::zeros(value.rows(), value.cols()));
        self.tensors.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Mat> {
        self.tensors
            .get(name)
            .ok_or_else(|| SspgError::Contract(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_all(&mut self) {
        for t in self.tensors.values_mut() {
            t.data_mut().fill(0.0);
        }
    }

    /// Check that `other` holds exactly the same parameter names with the
    /// same shapes.
    pub fn compatible_with(&self, other: &ParamStore) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(SspgError::Contract(format!(
                "parameter count mismatch: {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for (name, t) in &self.tensors {
            match other.tensors.get(name) {
                Some(o) if o.same_shape(t) => {}
                Some(o) => {
                    return Err(SspgError::dimension(
                        format!("parameter {name}"),
                        format!("{:?}", t.shape()),
                        format!("{:?}", o.shape()),
                    ))
                }
                None => return Err(SspgError::Contract(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }

    /// Copy parameter values from `other` (shapes must already agree).
    /// Moments and the step counter are left untouched.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, src) in &other.tensors {
            let dst = self
                .tensors
                .get_mut(name)
                .ok_or_else(|| SspgError::Contract(format!("unknown parameter {name}")))?;
            if !dst.same_shape(src) {
                return Err(SspgError::dimension(
                    format!("copy_values_from({name})"),
                    format!("{:?}", dst.shape()),
                    format!("{:?}", src.shape()),
                ));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    /// phi' <- tau * phi' + (1 - tau) * phi, elementwise over all tensors.
    pub fn polyak_from(&mut self, online: &ParamStore, tau: f64) -> Result<()> {
        for (name, src) in &online.tensors {
            let dst = self
                .tensors
                .get_mut(name)
                .ok_or_else(|| SspgError::Contract(format!("unknown parameter {name}")))?;
            for (d, &s) in dst.data_mut().iter_mut().zip(src.data().iter()) {
                *d = tau * *d + (1.0 - tau) * s;
            }
        }
        Ok(())
    }

    /// One Adam update with bias correction. `grads` must contain exactly
    /// one entry per parameter.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Mat>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
        for name in self.tensors.keys() {
            if !grads.contains_key(name) {
                return Err(SspgError::Contract(format!("missing gradient for {name}")));
            }
        }
        for name in grads.keys() {
            if !self.tensors.contains_key(name) {
                return Err(SspgError::Contract(format!("gradient for unknown parameter {name}")));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        for (name, theta) in self.tensors.iter_mut() {
            let g = &grads[name];
            if !g.same_shape(theta) {
                return Err(SspgError::dimension(
                    format!("adam_step({name})"),
                    format!("{:?}", theta.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
            let m = self.m.get_mut(name).expect("moment tracked at insert");
            let v = self.v.get_mut(name).expect("moment tracked at insert");
            for i in 0..theta.data().len() {
                let gi = g.data()[i];
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                theta.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
