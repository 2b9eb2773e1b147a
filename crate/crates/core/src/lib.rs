//! Guided generative sampling for continuous-time Markov chains on
//! factorized discrete state-spaces.
//!
//! The crate covers discrete flow matching with a masking noise process,
//! three ways of conditioning the generative rates on a target property
//! (exact predictor guidance, Taylor-approximated guidance and
//! predictor-free guidance), Euler and tau-leaping integrators, and
//! brute-force oracles that compute the exact law of the discretized chain
//! on small state-spaces.

// `!(x > 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod denoiser;
pub mod error;
pub mod guidance;
pub mod oracle;
pub mod predictor;
pub mod processes;
pub mod sampler;
pub mod smallnet;
pub mod state_space;
pub mod toys;

pub use error::{Error, Result};
pub use state_space::{OneHot, State, StateSpace};
