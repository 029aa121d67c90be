//! Latent-diffusion speech restoration on a small CPU tensor engine.
//!
//! The crate is organised bottom-up: [`tensor`] provides dense f32 tensors
//! with reverse-mode differentiation, [`dsp`] the spectral front-end,
//! [`codec`] the neural audio codec, [`losses`] its training objectives,
//! [`diffusion`] and [`estimator`] the latent denoiser, [`metrics`] the
//! objective scores and [`pipeline`] I/O, optimizers, checkpoints and the
//! training loops.

pub mod codec;
pub mod diffusion;
pub mod dsp;
pub mod error;
pub mod estimator;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use nn::Module;
pub use tensor::{no_grad, Conv1dSpec, Conv2dSpec, NoGradGuard, PadMode, Tensor};

/// Random generator used for initialization, sampling and data pipelines.
pub type SeededRng = rand_chacha::ChaCha8Rng;
