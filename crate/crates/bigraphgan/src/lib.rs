//! Bipartite graph reasoning GANs for pose-guided image synthesis.
//!
//! A self-contained implementation of the BiGraphGAN / BiGraphGAN++ graph
//! generator on top of a from-scratch reverse-mode differentiation engine:
//!
//! - [`tensor`]: dense tensors plus the recording tape (`f32` training mode,
//!   `f64` verification mode, bit-deterministic for a fixed seed);
//! - [`nn`]: parameter store, convolution layers, instance norm, Adam;
//! - [`blocks`]: the graph reasoning building blocks — BGR, IA, AIF, and the
//!   part-aware PBGR / part-IA variants;
//! - [`net`]: generator assembly, appearance/shape discriminators, the joint
//!   training objective and one-step trainer;
//! - [`data`]: deterministic synthetic 18-joint pose-transfer corpus;
//! - [`metrics`]: SSIM, Mask-SSIM, PSNR and the foreground pose mask;
//! - [`checkpoint`] / [`config`] / [`cli`]: persistence and the command-line
//!   harness (`generate-data`, `train`, `eval`, `infer`, `ablate`).
//!
//! The `examples/` directory holds one runnable example per capability; see
//! the README for a tour.

pub mod blocks;
pub mod data;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod net;
pub mod metrics;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
