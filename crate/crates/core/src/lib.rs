//! Multi-task adversarial robustness laboratory: a small reverse-mode
//! autodiff engine, shared-backbone multi-task networks, toy dense
//! prediction tasks, L∞ attacks, vulnerability analysis and adversarial
//! training.

mod codec;
pub mod error;

pub mod advtrain;
pub mod attacks;
pub mod data;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod vulnerability;

pub use error::{Error, FormatError, Result};
pub use tensor::{Tape, Tensor, Var};
