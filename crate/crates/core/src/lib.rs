//! Simulation core for federated optimization experiments.

pub mod algorithms;
pub mod compressors;
pub mod engine;
pub mod exec;
pub mod problems;
pub mod rng;
pub mod store;
pub mod vector;

pub use vector::Vector;
