//! Experiment runner and reproducibility surface over the core library.

pub mod artifacts;
pub mod bench;
pub mod config;
pub mod verify;
