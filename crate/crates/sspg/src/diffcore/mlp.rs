//! Fully-connected networks recorded on the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::adam::ParamStore;
use crate::diffcore::mat::Mat;
use crate::diffcore::tape::{NodeId, Tape};
use crate::error::{Result, SspgError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
}

/// Layer widths of a dense network. `hidden` may be empty, which yields a
/// single affine map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activation: Activation,
}

/// Whether network weights are bound to the tape as trainable leaves or as
/// value-copies that block the backward pass. Reasoning chains bind the
/// first transition trainable and every later one frozen, so that gradients
/// reach the parameters only through the first step while still flowing
/// through the chain's action inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    Trainable,
    Frozen,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: Vec<usize>, output: usize) -> Self {
        MlpSpec {
            input,
            hidden,
            output,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.output == 0 || self.hidden.iter().any(|&w| w == 0) {
            return Err(SspgError::Contract(format!(
                "all layer widths must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output));
        dims
    }

    pub fn weight_name(prefix: &str, layer: usize) -> String {
        format!("{prefix}/w{layer}")
    }

    pub fn bias_name(prefix: &str, layer: usize) -> String {
        format!("{prefix}/b{layer}")
    }

    /// Register freshly initialized parameters under `prefix`. Weights and
    /// biases draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn init_params(&self, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<()> {
        self.validate()?;
        for (layer, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut w = Mat::zeros(fan_in, fan_out);
            for v in w.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
            let mut b = Mat::zeros(1, fan_out);
            for v in b.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
            store.insert(&Self::weight_name(prefix, layer), w)?;
            store.insert(&Self::bias_name(prefix, layer), b)?;
        }
        Ok(())
    }
}

/// Forward pass of the network under `prefix`, recording every affine map
/// and nonlinearity on the tape. `x` holds one sample per row.
pub fn mlp_forward(
    tape: &mut Tape,
    spec: &MlpSpec,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    binding: Binding,
) -> Result<NodeId> {
    let got = tape.value(x).cols();
    if got != spec.input {
        return Err(SspgError::dimension(
            format!("mlp_forward({prefix})"),
            format!("{} input columns", spec.input),
            format!("{got}"),
        ));
    }
    let n_layers = spec.hidden.len() + 1;
    let mut h = x;
    for layer in 0..n_layers {
        let wname = MlpSpec::weight_name(prefix, layer);
        let bname = MlpSpec::bias_name(prefix, layer);
        let wv = store.get(&wname)?.clone();
        let bv = store.get(&bname)?.clone();
        let (w, b) = match binding {
            Binding::Trainable => (tape.param(&wname, wv), tape.param(&bname, bv)),
            Binding::Frozen => (tape.constant(wv), tape.constant(bv)),
        };
        h = tape.matmul(h, w)?;
        h = tape.add_row(h, b)?;
        if layer + 1 < n_layers {
            h = match spec.activation {
                Activation::Relu => tape.relu(h),
            };
        }
    }
    Ok(h)
}
