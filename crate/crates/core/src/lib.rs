//! Two-module learngene (θ_A, θ_B) linearly expanded into transformer
//! classifiers of arbitrary depth.
//!
//! Layer `l` of an `L`-layer network is `θ_B + (l−1)/L · θ_A`. The crate
//! trains the learngene inside an auxiliary network by distillation,
//! materializes descendants of any depth from it, and measures how linear
//! layer parameters are across depth.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod analysis;
pub mod descendant;
pub mod harness;
pub mod init;
pub mod learngene;
pub mod training;
pub mod vit;
