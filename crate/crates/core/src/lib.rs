//! Residual networks whose blocks are wired as explicit Runge-Kutta schemes.

pub mod error;
pub mod data;
pub mod diagnostics;
pub mod gradcheck;
pub mod network;
pub mod ode;
pub mod report;
pub mod rng;
pub mod schemes;
pub mod subnet;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Coef, Param, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};
