pub mod autodiff;
pub mod error;
pub mod data;
pub mod grid;
pub mod gradsuite;
pub mod localization;
pub mod mask;
pub mod metrics;
pub mod regularizer;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use autodiff::{Tape, Var};
pub use error::{AcrError, Result};
pub use tensor::Tensor;
