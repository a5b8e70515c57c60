//! Kalman-filter recurrent layers for model-free RL, trained end-to-end with
//! discrete soft actor-critic on a Best Arm Identification POMDP.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense arrays with reverse-mode differentiation on a dynamic tape
//! - [`scan`]: generic associative scans (sequential reference + logarithmic-depth
//!   parallel) and the masked-operator lifting for right-padded batches
//! - [`kalman`]: diagonal linear-Gaussian filtering, both as an exact sequential
//!   recursion and as a two-pass associative scan over Möbius/affine maps
//! - [`layers`]: trainable state-space layers (pure prediction and filtered
//!   variants) with zero-order-hold discretization and HiPPO initialization
//! - [`agent`]: recurrent actor-critic with discrete SAC losses, padded replay
//!   sampling and the training loop
//! - [`env`]: the Best Arm Identification environment and its evaluation grid

pub mod agent;
pub mod checkpoint;
pub mod env;
pub mod kalman;
pub mod layers;
pub mod rng;
pub mod scalar;
pub mod scan;
pub mod tensor;

pub use scalar::Scalar;
