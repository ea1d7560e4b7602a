//! Token-level explanations for language-model prompts.

pub mod aggregate;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod explain;
pub mod gateway;
pub mod granularity;
pub mod par;
pub mod perturb;
pub mod reference_lm;
pub mod types;

pub use error::{Error, Result};
