//! Stochastic Wasserstein–Hamiltonian systems on finite graphs.
//!
//! Density/momentum dynamics on the probability simplex of a weighted graph,
//! their Schrödinger form, and the associated stochastic optimal-control
//! problem with a small grid solver for its HJB equation.

// `!(x > 0.0)` style guards are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acceptance;
pub mod benchmark;
pub mod control;
pub mod convolution;
pub mod dynamics;
pub mod energy;
pub mod error;
pub mod graph;
pub mod hjb;
pub mod quadrature;
pub mod rng;
pub mod schrodinger;
pub mod truncation;
pub mod wasserstein;
pub mod weight;

pub use error::{Error, Result};
