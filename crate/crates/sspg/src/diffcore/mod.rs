//! Gradient substrate: dense matrices, a reverse-mode tape, dense layers,
//! and the Adam optimizer.

pub mod adam;
pub mod mat;
pub mod mlp;
pub mod tape;

pub use adam::{ParamStore, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use mat::Mat;
pub use mlp::{mlp_forward, Activation, Binding, MlpSpec};
pub use tape::{grad_check, GradCheckReport, NodeId, Tape};
