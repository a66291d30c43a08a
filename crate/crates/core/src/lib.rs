//! Teacher-student training where the teacher explores a sparse-reward task
//! by maximizing its own model surprise while shaping its demonstrations to
//! keep the surprise they cause in a heterogeneous student low.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod nn;
pub mod orchestrator;
pub mod policy;
pub mod student;
pub mod surprise;

pub use error::{Error, Result};
