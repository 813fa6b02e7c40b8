//! Desk-scale numerics for local Hardy spaces: maximal operators, polynomial
//! projectors, atomic and Calderon-Zygmund decompositions, elliptic operators
//! and the div-curl estimate harness built on them.

pub mod cli;
pub mod decomp;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod io;
pub mod norms;
pub mod operators;
pub mod poly;

pub use error::{Error, Result};
