//! Diffusion-process mathematics, independent of the denoising network.

mod process;
mod schedule;

pub use process::{
    p_sample_step, posterior_mean, predict_x0_from_eps, predict_x0_unclamped, q_sample, randn_per_item, sample_loop,
    training_loss, Denoiser,
};
pub use schedule::{cosine_f, make_schedule, Conditioning, DiffusionConfig, NoiseSchedule, ScheduleKind, MAX_BETA};
