//! Minimal tensor autodiff: tape, differentiable ops, parameters, and a
//! finite-difference gradient checker.

mod backward;
pub mod gradcheck;
mod ops;
mod params;
mod tape;

pub use gradcheck::{finite_diff_check, param_grad_check, relative_error, GradCheckReport, DEFAULT_EPS};
pub use ops::{concat, LAYER_NORM_EPS};
pub use params::{trunc_normal, ParamId, ParamStore, Parameter};
pub use tape::{Fault, Gradients, Tape, Var};
