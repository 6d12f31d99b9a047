//! Optimal control of systems governed by integral equations.
//!
//! Every solver reduces its control problem to second-kind integral
//! equations on a Nyström grid:
//!
//! * [`quadform`]: minimization of quadratic functionals over L²(G).
//! * [`lq_fredholm`]: linear-quadratic control of Fredholm dynamics.
//! * [`nl_fredholm`]: state-nonlinear, control-affine Fredholm dynamics.
//! * [`lq_volterra`]: linear-quadratic control of Volterra dynamics.
//!
//! [`oracle`] re-derives the discrete optimum by brute force, sharing only
//! grids and kernel evaluation with the solvers.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod discretize;
pub mod error;
pub mod fredholm;
pub mod kernelspec;
pub mod lq_fredholm;
pub mod lq_volterra;
pub mod nl_fredholm;
mod linalg;
pub mod oracle;
pub mod quadform;

pub use error::{Error, Result};
