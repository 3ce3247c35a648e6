//! Desk-scale laboratory for selective state-space (Mamba) policy networks:
//! a from-scratch f64 autodiff core, selective SSM layers with equivalent
//! execution modes, decoder-only and encoder-decoder denoising policies,
//! minimal attention baselines, synthetic imitation-learning tasks, and a
//! training/evaluation harness with ablation tooling.

pub mod arch;
pub mod error;
pub mod params;
pub mod policy;
pub mod rng;
pub mod tensor;
pub mod toy;

pub mod harness;
pub mod mamba;
pub mod ssm;

pub use error::{Error, Result};
