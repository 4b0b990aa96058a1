//! Minimal reverse-mode differentiation for small dense networks.

mod gradcheck;
mod mlp;
mod optim;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, Parameterized, ProbeResult};
pub use mlp::{backward, mlp_forward, Activation, MlpSpec, MlpTape, Network, ParamGroup};
pub use optim::sgd_step;
