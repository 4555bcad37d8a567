//! Zero-temperature single-spin-flip dynamics on finite tori with quenched
//! disorder, plus a percolation-based Lyapunov function and the checks that
//! audit it along simulated trajectories.
//!
//! Module map:
//! - [`lattice`]: periodic `d`-dimensional lattice geometry
//! - [`disorder`]: couplings and fields, sampled from counter-based streams
//! - [`hamiltonian`]: spin spaces, local potentials, energy changes
//! - [`dynamics`]: event-driven simulation, flip statistics, classification
//! - [`percolyap`]: bond weights, open clusters, Lyapunov tables and audits
//! - [`harness`]: experiment configs, replicate runs and file emission

pub mod disorder;
pub mod dynamics;
pub mod error;
pub mod hamiltonian;
pub mod harness;
pub mod lattice;
pub mod numeric;
pub mod percolyap;
pub mod rng;
pub mod unionfind;

pub use error::{Error, Result};
