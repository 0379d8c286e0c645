//! Training-free subject/style composition on a desk-scale latent
//! diffusion stack.
//!
//! The pieces, bottom up:
//!
//! * [`tensor`] — f64 tensors, a per-pass gradient tape, Adam.
//! * [`schedule`] — noise schedules, forward noising, clean-latent
//!   prediction, deterministic DDIM stepping.
//! * [`conditioning`] — text embedding plus analytic style/subject
//!   descriptors and the trained projector networks that turn descriptor
//!   embeddings into cross-attention pseudo-tokens.
//! * [`denoiser`] — a small cross-attention denoiser whose conditioning
//!   fusion orthogonalizes subject features against text and grows the
//!   style weight over time, plus the toy decoder.
//! * [`controller`] — per-timestep latent optimization against a
//!   four-term terminal cost, in first-order (tape + Adam) or zero-order
//!   (SPSA + Adam, tape-free) mode, and the full generation loop.
//! * [`training`] — synthetic corpus generation, denoiser pretraining,
//!   and targeted projector training.
//! * [`metrics`] — similarity/leakage metrics and report aggregation.
//! * [`io`] — run configs, tensor blobs, checkpoints, PPM images.

pub mod conditioning;
pub mod controller;
pub mod denoiser;
pub mod error;
pub mod io;
pub mod metrics;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
