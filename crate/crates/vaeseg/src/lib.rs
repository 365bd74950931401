//! Volumetric segmentation with a variational reconstruction branch.
//!
//! The crate builds everything from a small reverse-mode autodiff core:
//! tensors and the op graph live in [`tensor`] and [`ops`], the network in
//! [`model`], training in [`losses`] and [`optim`], and the surrounding
//! tooling (synthetic data, checkpoints, inference, evaluation metrics, CLI
//! commands) in the remaining modules. All computation is CPU-only, f32 with
//! f64 accumulation in reductions, and deterministic for a fixed seed.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod gradprobe;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod rvol;
pub mod tensor;
pub mod vol;

pub use error::{Error, Result};
