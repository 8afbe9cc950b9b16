//! Video deblurring with a wavelet-aware dynamic transformer guided by a
//! compact-latent conditional diffusion prior.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: `f64` tensors, reverse-mode tape, convolutions, FFT, gradient checks.
//! * [`wavelet`]: orthonormal single-level 2D Haar analysis and synthesis.
//! * [`wadt`]: prior modulation, channel attention, gated feed-forward and the full backbone.
//! * [`wbpf`]: bidirectional recurrent propagation between frames.
//! * [`diffusion`]: noise schedule, forward/reverse processes, encoders and the noise predictor.
//! * [`training`]: losses, metrics, optimiser, checkpoints and the three training stages.
//! * [`datakit`]: synthetic blur clips and PNG frame-directory datasets.

pub mod datakit;
pub mod diffusion;
pub mod error;
pub mod model;
pub mod numerics;
pub mod training;
pub mod wadt;
pub mod wavelet;
pub mod wbpf;

pub use error::{Error, Result};
pub use numerics::Tensor;
