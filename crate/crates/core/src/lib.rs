//! Dose-aware conditional diffusion for 3D low-count PET denoising.
//!
//! The pipeline is built from small, independently testable pieces:
//!
//! * [`schedule`]: noise schedule, forward noising and the true reverse posterior.
//! * [`volume`]: the 3D activity grid, synthetic phantoms, Poisson count thinning,
//!   2.5D conditioning windows and the on-disk volume format.
//! * [`predictor`]: condition embeddings, the epsilon/variance predictor trait, an
//!   analytic Gaussian oracle and a small trainable encoder-decoder network.
//! * [`trainer`]: paired sampling, the epsilon + learned-variance objective and Adam.
//! * [`sampler`]: DDPM/DDIM reverse steps, the hybrid step plan and the slice-wise
//!   volume sampler with fixed latents, dual noise variables and a denoised prior.
//! * [`prior`]: denoised-prior providers (trained mini-denoiser, Gaussian smoothing).
//! * [`metrics`]: masked PSNR/NRMSE/SSIM, inter-slice variation and activity error.
//! * [`cli`]: the command-line surface.

pub mod cli;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod nn;
pub mod predictor;
pub mod prior;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use grid::Grid;
