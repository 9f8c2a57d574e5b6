//! Gradient descent on linearly separable data, viewed through its dual.

pub mod error;
pub mod linalg;
pub mod loss;
pub mod smoothed;
pub mod data;
pub mod descent;
pub mod dual;
pub mod bounds;
pub mod oracle;
pub mod runner;

pub use error::{Error, Result};
pub use loss::{LossFunction, LossKind};
pub use smoothed::DualPoint;
