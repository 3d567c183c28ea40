//! Simulation of neural-network training and inference on compute-in-memory
//! hardware: nonlinear nonvolatile synaptic devices in crossbar arrays,
//! device variation, SRAM bitline nonlinearity, and spiking networks trained
//! with STDP.

pub mod crossbar;
pub mod data;
pub mod device;
pub mod error;
pub mod nn;
pub mod par;
pub mod persist;
pub mod rng;
pub mod snn;
pub mod variation;

pub use error::{Error, Result};
