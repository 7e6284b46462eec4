//! Parametric (economic) NMPC schemes used as function approximators for
//! reinforcement learning.
//!
//! The crate is `no_std` + `alloc` compatible; disable the default `std`
//! feature to build it for targets without an operating system. File formats,
//! configuration and the command line live in the `enmpc` companion crate.
//!
//! Module map:
//!
//! - [`mdp`]: tabular ground truth (value iteration, modified stage cost,
//!   model-mismatch and cost-rotation certificates).
//! - [`theta`], [`ocp`], [`schemes`]: the parameter vector, the parametric
//!   optimal-control problem and the two experiment schemes.
//! - [`solver`]: dense primal-dual interior-point solver for V and Q.
//! - [`sensitivity`]: parameter gradients of V, Q and the policy.
//! - [`rl`]: TD learning, ε-greedy exploration, deterministic policy gradient.
//! - [`lqr`]: discounted Riccati machinery and quadratic cost rotations.
//! - [`plants`]: the simulated "real" systems.
#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::needless_range_loop, clippy::too_many_arguments, clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

mod prelude;

pub mod error;
pub mod linalg;
pub mod lqr;
pub mod mdp;
pub mod ocp;
pub mod plants;
pub mod rl;
pub mod schemes;
pub mod sensitivity;
pub mod solver;
pub mod theta;

pub use error::{Error, Result};
pub use ocp::{OcpInstance, ParametricOcp, Trajectory};
pub use solver::{PrimalDualSolution, Solver, SolverOptions};

pub use theta::{SliceKind, ThetaLayout, ThetaVector};
