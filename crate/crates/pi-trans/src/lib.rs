//! Cross-view image translation GAN with a self-contained autodiff engine.
//!
//! The generator pairs two parallel Conv-MLP encoder branches (aerial image
//! and ground-view semantic map) with a dual decoder: a direct translation
//! branch and a semantically-guided branch fused through implicit
//! transformation attention at three feature levels. Training is a
//! conditional GAN with patch discriminators, hand-implemented Adam, and a
//! fully deterministic seeding story. Everything — tensors, reverse-mode
//! autodiff, gradient checking, image I/O, a synthetic paired-scene dataset,
//! and a parameter/MAC profiler — lives in this crate with no external
//! numerics dependencies.

pub mod ablate;
pub mod analyze;
pub mod config;
pub mod data;
pub mod error;
pub mod gan;
pub mod generator;
pub mod itm;
pub mod nn;
pub mod pconvmlp;
pub mod suite;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
