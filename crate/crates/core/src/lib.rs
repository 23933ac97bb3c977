//! Training and inference engine for PSUNet, a lightweight salient object
//! detector built from a symmetric pixel shuffle boundary, tiny residual
//! U-blocks and a hybrid BCE + SSIM + IoU objective.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod train;

pub use autodiff::{grad_check, Eval, Graph, Tape, Var};
pub use error::{CheckpointError, Error, ErrorCategory, Result};
pub use tensor::{Scalar, Shape, Tensor};
