//! Time-evolution finite-element solvers for structured boxes of quadratic
//! tetrahedra, built around three ideas:
//!
//! * **Matrix-free element-by-element operators** that apply the Newmark
//!   system matrix as a linear combination of per-element mass and stiffness
//!   blocks, batched over several right-hand sides at once so the element
//!   data is read once per group of solves.
//! * **Data-driven initial guesses** for the iterative solver: a fourth-order
//!   Adams–Bashforth extrapolation plus an orthogonal-decomposition corrector
//!   trained on the recent history of (prediction error, correction) pairs,
//!   with a feedback controller that sizes the history to balance prediction
//!   cost against solve cost.
//! * **A dual-lane pipeline** that overlaps prediction for one batch of cases
//!   with the solve of another, mirroring a host/accelerator split with
//!   explicit transfer stages and an exclusivity token for the solver
//!   executor.
//!
//! The crate is deliberately hardware-agnostic: "accelerator" is an executor
//! role (a thread pool plus an exclusivity token), not a device, and every
//! kernel has a plain sparse-matrix baseline so results can be cross-checked
//! to tight tolerances on any machine. All reductions use fixed association
//! orders, so repeated runs with the same configuration, seeds, and thread
//! counts reproduce results bit-for-bit.

pub mod cg;
pub mod config;
pub mod ebe;
pub mod elasticity;
pub mod ensemble;
pub mod experiment;
pub mod mesh;
pub mod pipeline;
pub mod predictor;
pub mod quadrature;
pub mod sparse;
pub mod timeloop;
