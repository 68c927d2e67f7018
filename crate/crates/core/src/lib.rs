//! Simulation and reconstruction toolkit for X-ray ptycho-tomography of
//! layered, IC-like volumes.
//!
//! The pipeline runs phantom synthesis, mixed-state multi-slice diffraction
//! simulation, the gradient-descent Approximant, classical tomographic
//! baselines, fidelity metrics, and missing-wedge / operating-point analysis.

pub mod analysis;
pub mod approximant;
pub mod config;
pub mod metrics;
pub mod error;
pub mod fft;
pub mod optics;
pub mod phantom;
pub mod pipeline;
pub mod ptychosim;
pub mod scanplan;
pub mod tomo;
pub mod volume;

#[cfg(test)]
mod testkit;

pub use error::{Error, Result};
