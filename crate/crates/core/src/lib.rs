//! Multi-lane vehicle formations, slot assignment, and virtual-platoon
//! scheduling at unsignalised intersections, with a discrete-time simulator.

pub mod assignment;
pub mod baselines;
pub mod cli;
pub mod collision;
pub mod config;
pub mod error;
pub mod formation_geometry;
pub mod intersection;
pub mod regrouping;
pub mod sim;
pub mod vehicle_dynamics;

pub use error::{Error, Result};
