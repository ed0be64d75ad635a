//! Forward/reverse diffusion over the population, with the exact mixture
//! denoiser standing in for a trained noise-prediction network.

mod denoiser;
mod loss;
mod sampler;
mod schedule;

pub use denoiser::{exact_epsilon, sharpen_mixture, Denoiser, ExactDenoiser, ZeroDenoiser};
pub use loss::{dm_loss, dm_loss_with, LossDraw};
pub use sampler::{denoise_from, sample_reverse, SampleBatch};
pub use schedule::{build_schedule, forward_diffuse, reverse_step, NoiseSchedule, ScheduleKind, SigmaRule};
