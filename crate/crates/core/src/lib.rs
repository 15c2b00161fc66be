//! Numéraire-based utility maximization under proportional transaction costs
//! on finite scenario trees.
//!
//! The crate solves the frictional problem with no-short-selling constraints
//! and a nonnegative terminal endowment, builds a consistent price system from
//! the marginal value of the optimal holdings, and checks that the implied
//! frictionless price is a shadow price. A Monte Carlo harness reproduces the
//! Black–Scholes example with negative endowment where a shadow price is known
//! in closed form.
//!
//! Everything here is `no_std` with `alloc`; file formats, threading and the
//! command line live in the `shadowtree` crate.

#![no_std]
// Negated comparisons reject NaN together with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod bs;
pub mod error;
pub mod friction;
pub mod frictionless;
pub mod market;
mod program;
pub mod shadow;
pub mod utility;

pub use error::{Error, Result};
pub use friction::{SolveReport, TradePlan};
pub use market::{EndowmentSpec, Node, NodeRecord, ScenarioTree};
pub use program::SolverOptions;
pub use utility::UtilitySpec;
