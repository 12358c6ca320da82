//! Randomized job assignment for heterogeneous clusters of processor-sharing
//! servers.
//!
//! The crate has three layers:
//!
//! * [`cluster`] — model parameters ([`ClusterSpec`]), truncated tail-sequence
//!   states ([`TailState`]), the weighted sup metric, and the capacity-ratio
//!   index maps shared by everything else.
//! * [`meanfield`] / [`equilibrium`] — the large-system ODE limits of the two
//!   sampling-based dispatch schemes, a projected RK4 integrator, and
//!   fixed-point solvers for the stationary tail distributions (with an
//!   independent two-type construction used as a cross-check).
//! * [`sim`] / [`analysis`] — a finite-N discrete-event simulator of the
//!   cluster under four dispatch policies, plus the theory-vs-simulation
//!   experiment tables used by the CLI.
//!
//! Dispatch policies are strategy objects behind the
//! [`sim::policy::DispatchPolicy`] trait and are selected by name at runtime
//! (`scheme1`, `scheme2`, `state_independent`, `hybrid_sqd`).

pub mod analysis;
pub mod cluster;
pub mod config;
pub mod equilibrium;
pub mod meanfield;
pub mod sim;
pub mod stats;

pub use cluster::{ClusterSpec, Scheme, SpecError, TailState};
pub use equilibrium::{fixed_point, mean_sojourn, FixedPointOptions};
pub use sim::{JobDist, SimConfig, SojournStats};
