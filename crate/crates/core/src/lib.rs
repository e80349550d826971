//! Deterministic laboratory for studying demographic bias in conditional
//! diffusion sampling, built on an analytically tractable world.
//!
//! The crate provides five pieces that plug together:
//!
//! * [`codec`] — a synthetic token-structured text encoder plus every
//!   embedding-space edit the guidance schemes need (attribute directions,
//!   EOS-masked weak additions, annealed condition noise).
//! * [`world`] — a conditional Gaussian-mixture data distribution with
//!   closed-form diffused scores, standing in for a pretrained denoiser,
//!   and a Bayes-optimal attribute classifier standing in for an external
//!   zero-shot classifier.
//! * [`diffusion`] — a discrete variance-preserving schedule with forward
//!   noising, ancestral/deterministic reverse steps, and classifier-free
//!   guidance combination.
//! * [`guidance`] — per-step condition selection for every sampling scheme
//!   under study (vanilla, CFG, annealed noise, prompt swapping, prompt
//!   appending, and EOS-masked weak attribute guidance).
//! * [`metrics`] / [`stats`] — attribute ratios, discrepancy scores,
//!   compliance, alignment and energy-distance proxies, and the statistical
//!   tests the experiment harness relies on.
//!
//! Everything is pure and seedable: given the same inputs and RNG streams,
//! every function returns bit-identical results on every platform. The crate
//! is `no_std` (with `alloc`); all transcendental math goes through `libm`.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod codec;
pub mod diffusion;
pub mod gaussian;
pub mod guidance;
pub mod metrics;
pub mod presets;
pub mod seed;
pub mod stats;
pub mod world;

use alloc::string::String;

/// Errors shared across the crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("unknown token `{0}` in prompt")]
    UnknownToken(String),
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("unknown context `{0}`")]
    UnknownContext(String),
    #[error("prompt has {got} prefix tokens but the codec length {len} leaves room for {max}")]
    PromptTooLong { got: usize, max: usize, len: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("cannot renormalize row {row}: degenerate norm")]
    DegenerateRow { row: usize },
    #[error("reverse step at t = 0 would underflow the schedule")]
    StepUnderflow,
    #[error("step {0} is outside the schedule range")]
    StepOutOfRange(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("context `{0}` has no attribute components")]
    NoAttributes(String),
    #[error("empty sample set")]
    EmptySamples,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = core::result::Result<T, Error>;
