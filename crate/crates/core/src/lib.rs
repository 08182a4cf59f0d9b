//! Tikhonov regularization with polyconvex integrands.
//!
//! The crate provides the minors map and its derivatives, a small family of
//! polyconvex integrands, discrete energies on quadrilateral grids, an image
//! registration forward operator, `W_poly`-subgradients and Bregman
//! distances, and an L-BFGS based harness for convergence-rate experiments.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bregman;
pub mod config;
pub mod error;
pub mod field;
pub mod gradcheck;
pub mod grid;
pub mod integrands;
pub mod io;
pub mod minors;
pub mod parallel;
pub mod rates;
pub mod registration;
pub mod solver;

pub use error::{Error, Result};
