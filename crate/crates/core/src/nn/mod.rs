//! Layered models with per-layer parameter blocks.

mod kernels;
mod network;
mod params;
mod spec;

pub use network::{backward, backward_with_loss, evaluate, forward_loss, full_gradient, init_params, Evaluation};
pub use params::{apply_local_step, LayerwiseParams, PartialGradient};
pub use spec::{Activation, ModelKind, ModelSpec, OutputKind, CNN_KERNEL};
