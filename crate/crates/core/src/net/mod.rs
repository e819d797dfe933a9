//! Toy masked discrete diffusion denoiser.

pub mod checkpoint;
pub mod model;
pub mod objective;
pub mod optim;
pub mod pretrain;
pub mod transformer;

pub use checkpoint::Checkpoint;
pub use model::{InitOptions, Layout, ModelConfig, ModelParams};
pub use objective::{corrupt, denoising_loss, denoising_loss_value, per_token_logprob, LossAndGrad, MaskingSample};
pub use optim::{AdamWConfig, OptimizerState};
pub use pretrain::{pretrain, PretrainConfig, PretrainOutput};
pub use transformer::{backward, forward, forward_with_cache, ForwardCache, ForwardOutput};
