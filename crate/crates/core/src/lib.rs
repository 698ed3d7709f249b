//! Hierarchical reinforcement-learning optimal control.
//!
//! The library composes three layers:
//!
//! 1. **Local system identification** — naive exploratory rollouts of a
//!    nonlinear plant are cut into sub-trajectories near chosen linearisation
//!    centres, and a linear dynamical system with inputs is fitted to each
//!    centre by expectation-maximisation ([`sysid`], [`ldsi`]).
//! 2. **Low-level control** — each local model is turned into an
//!    infinite-horizon LQR feedback gain ([`lqr`]).
//! 3. **High-level policy** — a tabular Monte-Carlo reinforcement learner
//!    picks which gain to run in each cell of a coarse symbolic state grid
//!    ([`rl`]); non-learning baselines and evaluation live in [`baselines`].
//!
//! [`experiment`] wires the layers into reproducible, file-backed runs.

pub mod baselines;
pub mod error;
pub mod experiment;
pub mod io;
pub mod ldsi;
pub mod lqr;
pub mod plant;
pub mod rl;
pub mod sysid;

pub use error::{Error, Result};
