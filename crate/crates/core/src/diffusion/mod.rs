//! Denoising diffusion: schedule, forward noising, the noise predictor, its
//! training loop and the fixed-path ancestral sampler.

pub mod sampler;
pub mod schedule;
pub mod train;
pub mod unet;

pub use sampler::{denoise_step, sample, NoisePath};
pub use schedule::{build_schedule, forward_noise, Interpolation, VarianceSchedule};
pub use train::{train_diffusion, DiffusionTrainConfig, NoisePredictor};
pub use unet::{UNet, UNetConfig};
