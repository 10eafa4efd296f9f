//! Shape sensitivity of semilinear obstacle problems on P1 finite elements,
//! and a time-discrete damage model with dynamic obstacles built on top.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cones;
pub mod damage;
pub mod error;
pub mod expr;
pub mod fem;
pub mod flow;
pub mod functions;
pub mod io;
pub mod linalg;
pub mod mesh;
pub mod parallel;
pub mod sensitivity;
pub mod vi;

pub use error::{Error, Result};
