//! Simulator and solver library for confederated learning: several edge
//! servers, each serving its own private users, connected by a
//! decentralized server graph and jointly minimizing a sum of strongly
//! convex user losses.
//!
//! The crate is organized around five modules:
//!
//! * [`topology`] builds the server graph and every matrix derived from it
//!   (incidence, Laplacian, degree, and the proximal `D`/`P` matrices).
//! * [`problem`] holds user objectives, the inexact proximal solver, data
//!   ingestion and the centralized reference solution.
//! * [`cfl_admm`] is the ADMM state machine with random user scheduling.
//! * [`baselines`] provides GT-SAGA, D-SGD and a dense exact ADMM oracle.
//! * [`harness`] runs experiments and writes CSV traces.

pub mod baselines;
pub mod cfl_admm;
pub mod error;
pub mod harness;
pub mod problem;
pub mod topology;

pub use error::{CflError, Result};

/// Model vectors, one per user or per server.
pub type Vector = nalgebra::DVector<f64>;
