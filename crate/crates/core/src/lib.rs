//! Morphology-conditioned hypernetworks that compile compact per-robot MLP
//! controllers, trained by distilling a universal transformer teacher.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense tensors, a reverse-mode tape, Adam.
//! - [`morphology`]: limb trees, context features, mutation-based families.
//! - [`architectures`]: multi-robot MLP, transformer, hypernetwork and the
//!   compiled per-robot MLP, plus the `HDK1` checkpoint container.
//! - [`distillation`]: KL objective, `HDD1` datasets, the training loop and
//!   per-robot teacher fits.
//! - [`analysis`]: parameter and FLOPs accounting.
//! - [`harness`]: the seeded oracle teacher, evaluation and ablations.

pub mod analysis;
pub mod architectures;
pub mod distillation;
mod error;
pub mod harness;
pub mod morphology;
pub mod numerics;
pub mod rng;

pub use error::{Error, Result};
