//! Neural surrogate for next-step soft-tissue deformation, with its
//! training loop and evaluation harness.

pub mod checkpoint;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod tape;
pub mod train;
