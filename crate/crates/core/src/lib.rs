// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod container;
pub mod corrupt;
pub mod detect;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod phantom;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Element, Tensor};
