//! Numerical substrate: matrices, MLPs, Adam, and finite-difference checks.

mod adam;
mod gradcheck;
mod mat;
mod mlp;
mod params;

pub use adam::{adam_step, clip_grad_norm, l2_norm, AdamState, StepStats};
pub use gradcheck::{gradient_check, relative_error, GradCheckReport, RELATIVE_ERROR_FLOOR};
pub use mat::Mat;
pub use mlp::{Activation, MlpCache, MlpSpec};
pub use params::{ParamBlock, ParamVector};
