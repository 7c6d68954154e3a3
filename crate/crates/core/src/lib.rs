//! Physics-informed ReLU networks for DC optimal power flow, with exact
//! worst-case guarantees computed by mixed-integer linear programming.
//!
//! The crate is organised bottom-up:
//!
//! - [`grid`]: case files, network validation and PTDF computation.
//! - [`lp`]: dense bounded-variable simplex with duals.
//! - [`dcopf`]: the DC-OPF linear program, KKT residuals and prediction metrics.
//! - [`sampling`]: Latin hypercube sampling and labelled datasets.
//! - [`pinn`]: the two-headed ReLU network, its loss variants and training.
//! - [`verifier`]: MILP encodings and branch-and-bound worst-case analysis.

pub mod dcopf;
pub mod error;
pub mod grid;
pub mod lp;
pub mod pinn;
pub mod sampling;
pub(crate) mod textio;
pub mod verifier;

pub use error::{Error, Result};
