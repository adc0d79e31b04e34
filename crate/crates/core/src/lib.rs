//! Gradient-regularized few-shot adaptation on a synthetic dual-encoder
//! benchmark.
//!
//! The crate provides:
//!
//! - a minimal dense-tensor reverse-mode autodiff engine ([`tape`]),
//! - a frozen dual-encoder backbone with LoRA adapters and an image-aware
//!   text-adjustment head ([`models`]),
//! - sharpness-aware perturbed gradients with conflict-filtered fusion and a
//!   cosine-annealed update rule ([`optim`]),
//! - the classification objective with a zero-shot-preserving KL term
//!   ([`objective`]),
//! - a deterministic synthetic base-to-novel benchmark generator ([`bench`]),
//! - accuracy / harmonic-mean / flatness metrics ([`metrics`]),
//! - and a configured experiment harness with an ablation grid ([`harness`]).

pub mod bench;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod objective;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::ParamSet;
pub use tensor::Tensor;
