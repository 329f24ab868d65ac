//! Padding-free patch proposal, CAM-guided patch selection and sequential
//! early-exit classification.

pub mod autograd;
pub mod error;
pub mod io;
pub mod model;
pub mod ops;
pub mod pipeline;
pub mod report;
pub mod rf;
pub mod seed;
pub mod select;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Shape, Tensor};
