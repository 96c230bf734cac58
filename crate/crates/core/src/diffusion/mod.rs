//! Conditional DDPM with classifier-free guidance, plus the surrogate
//! generator used to isolate training behaviour from generation quality.

pub mod denoiser;
pub mod model;
pub mod schedule;
pub mod synth;

pub use denoiser::{
    combine_guidance, denoise_loss_and_grads, guided_epsilon, loss_and_grads_on, time_embedding,
    DenoiseExample, DenoiseStep, Denoiser, DenoiserShape,
};
pub use model::{ancestral_sample, pair_conditions, pretrain, DiffusionHP, DiffusionModel, PairConditions};
pub use schedule::{forward_noise, make_schedule, NoiseSchedule};
pub use synth::{synthesize_task_data, Draw, Generator, SurrogateGenerator, SynthSample, SynthSet};
