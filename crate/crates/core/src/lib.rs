//! Optimization over trained ReLU networks with a difference-of-convex
//! algorithm.
//!
//! ReLU constraints are written as complementarity pairs `0 <= y ⊥ v >= 0`
//! and moved into the objective as a bilinear penalty `ρ·yᵀv`. The penalized
//! problem is a difference of convex functions and is solved by iterating a
//! convex QP ([`dca`]). The penalty is chosen from a strongly stationary point
//! of a linear relaxation ([`penalty`]), and small instances can be solved
//! globally by enumerating activation patterns ([`oracle`]). The [`opf`] and
//! [`pipeline`] modules apply all of this to allocating data-center demand in
//! a DC power grid priced by locational marginal prices.

pub mod dca;
pub mod error;
pub mod formulation;
pub mod network;
pub mod opf;
pub mod oracle;
pub mod penalty;
pub mod pipeline;
pub mod qp;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use formulation::{assemble, CostSpec, GeneralForm, InputDomain, StackedPoint};
pub use network::{ActivationTrace, LayerParams, ReluNetwork};
