//! Cost-propagation networks and gradient estimators for stochastic
//! computation graphs.
//!
//! A stochastic computation graph (SCG) mixes sampling operations,
//! deterministic computations and cost nodes; training minimizes the
//! expected total cost over distribution parameters. This crate builds
//! the reversed cost-propagation network over such a graph, learns a
//! local surrogate cost (a Q-function) per stochastic node with
//! TD-style updates, and trains the distribution parameters through a
//! family of score-function / pathwise / control-variate gradient
//! estimators. An exact enumeration oracle verifies every construction
//! on small discrete instances.
//!
//! The crate is `no_std`-compatible (requires `alloc`); all floating
//! point transcendentals go through `libm` so results are identical
//! across platforms and feature sets.

#![cfg_attr(not(feature = "std"), no_std)]
// Guards like `!(p > 0.0)` intentionally treat NaN as invalid input.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod approx;
pub mod dist;
pub mod estimators;
pub mod expr;
pub mod learn;
pub mod model;
pub mod network;
pub mod oracle;
pub mod quad;
pub mod rng;
pub mod sample;
pub mod scope;
pub mod tape;
pub mod train;

pub use expr::{Expr, Value};
pub use model::{CostId, NodeId, ParamStore, ScgModel, ValidatedScg};
pub use network::{BpqNetwork, QKey, QNode, QOwner};
pub use sample::{SamplePlan, Trace};
pub use scope::ScopeSet;
pub use tape::{GradMap, Tape, TapeId};
