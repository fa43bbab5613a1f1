//! Pixel-space conditional diffusion: schedule, denoiser, sampler and pretraining loss.
//!
//! Images live in model space `[-1, 1]` inside the chain; they are mapped back
//! to `[0, 1]` and clamped only when handed to a reward.

mod denoiser;
mod pretrain;
mod sampling;
mod schedule;

pub use denoiser::{
    timestep_embedding, Denoiser, DenoiserCache, DenoiserConfig, DenoiserGrads, NoisePredictor, ROOT as DENOISER_ROOT,
};
pub use pretrain::{denoising_loss, noise_batch, pretrain_step, NoisedBatch, EMPTY_PROMPT_PROB};
pub use sampling::{
    gaussian_log_prob, gaussian_log_prob_grad, guided_noise, posterior_mean, reverse_step, sample_chains,
    sample_trajectories, sample_trajectory, Chain, ReverseStepDistribution, Trajectory, TrajectoryStep,
};
pub(crate) use sampling::{combine_guidance, guided_batch, normal_vec};
pub use schedule::{build_schedule, forward_diffuse, NoiseSchedule};
