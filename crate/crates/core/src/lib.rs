//! Numerical toolkit for causal variational principles on discrete measures.

pub mod cfs;
pub mod el;
pub mod error;
pub mod expansion;
pub mod fit;
pub mod fragmentation;
pub mod jet;
pub mod lagrangian;
pub mod linops;
pub mod measure;
pub mod mixing;

pub use error::{CvpError, Result};
