//! Simulation and analysis of the 1-D stochastic Cahn-Hilliard equation
//! `dX + A(AX + F(X))dt = G(X)dW` on `(0, L)` with Dirichlet conditions.

pub mod coefficients;
pub mod dense;
pub mod density;
pub mod error;
pub mod harness;
pub mod integrator;
pub mod malliavin;
pub mod model;
pub mod noise;
pub mod rng;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};
