//! Memory-update rule zoo, a hybrid sliding-window / linear-attention block
//! with a fast-weight trigger, a small language model built from it, and the
//! reverse-mode tape used to train and verify all of the above.

pub mod autodiff;
pub mod block;
pub mod error;
pub mod model;
pub mod numerics;
pub mod rules;

pub use error::{Error, Result};
pub use numerics::{Precision, Rng, Tensor};
