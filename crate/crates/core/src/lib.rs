//! Structured-grid solvers for the second boundary value problem of singular
//! Abreu equations, the penalised Rochet–Choné approximation scheme built on
//! them, and Legendre-type duality verifiers.

pub mod abreu_system;
pub mod duality;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod linearized_ma;
pub mod manufactured;
pub mod monge_ampere;
pub mod par;
pub mod rochet_chone;

pub use error::{Error, Result};
