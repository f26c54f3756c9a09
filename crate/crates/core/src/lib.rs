pub mod baselines;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod mealkit;
pub mod stage1;
pub mod stage2;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{ModelError, Result};
