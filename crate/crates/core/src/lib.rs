//! Adaptive transport-map MCMC.
//!
//! A lower-triangular polynomial map is fitted to the chain's own history and
//! used to propose in a reference space where the target looks closer to a
//! standard normal.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod error;
pub mod mcmc;
pub mod optimizer;
pub mod par;
pub mod polybasis;
pub mod problems;
pub mod proposals;
pub mod samples;
pub mod target;
pub mod transport_map;

pub use error::{Error, Result};
pub use par::Execution;
pub use polybasis::{MultiIndex, MultiIndexSet, PolynomialFamily};
pub use samples::SampleMatrix;
pub use target::Target;
pub use transport_map::TriangularMap;
