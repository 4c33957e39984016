//! Quantization noise analysis for iterative denoising models.
//!
//! The crate fake-quantizes a UNet-like module graph, measures relative
//! quantization noise (SQNR) per module and at the output in a single
//! instrumented forward pass, locates quantization-sensitive blocks and
//! modules, and applies two remedies: hybrid precision from a cut block
//! onward and per-channel activation smoothing on the most sensitive
//! modules. A small diffusion harness drives calibration and evaluation,
//! and a planner accounts BOPs and model size for each precision layout.

pub mod diffusion;
pub mod error;
pub mod graph;
pub mod io;
pub mod planner;
pub mod quant;
pub mod rng;
pub mod sensitivity;
pub mod smoothing;
pub mod sqnr;
pub mod tensor;

pub use error::{Error, Result};
