//! Trajectory diffusion: noise schedule, denoiser network, training and guided sampling.

pub mod guidance;
pub mod model;
pub mod network;
pub mod sampler;
pub mod schedule;

pub use guidance::{guidance_cost, guidance_grad, GuidanceSpec};
pub use model::{train, train_trajectories, DenoiserModel, Normalizer, TrainConfig, TrainOutcome};
pub use network::{Denoiser, MlpShape, ResidualMlp};
pub use sampler::{sample, sample_pinned, warm_sample, Query, ReverseProcess, SamplerConfig, Start};
pub use schedule::VarianceSchedule;
