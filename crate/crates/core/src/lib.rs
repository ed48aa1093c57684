//! Typical tables and maximum-likelihood tilts for random matrices with
//! prescribed row and column sums.

// `!(x > 0.0)` is used deliberately so that NaN takes the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod margin;
pub mod measure;
mod roots;
pub mod sampler;
mod serde_float;
pub mod sinkhorn;
pub mod spectral;
pub mod stability;
pub mod tameness;

pub use error::{Error, Result};
pub use margin::{Feasibility, Margin, StepMargin};
pub use measure::{BaseMeasure, ExponentialFamily, Family, TamenessBand};
pub use sinkhorn::{solve, Alpha0, Potentials, SinkhornReport, Solution, SolverConfig, TypicalTable};
