//! Deep learning on tensor-relations: layers compiled to relational plans,
//! reverse-mode differentiation over those plans, training loops, and SQL
//! emission of the forward pass.

pub mod autodiff;
pub mod checks;
pub mod datasets;
pub mod error;
pub mod layers;
pub mod oracle;
pub mod plan;
pub mod relcore;
pub mod sqlcheck;
pub mod sqlgen;
pub mod train;

pub use error::{Error, Result};
