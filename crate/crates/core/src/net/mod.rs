//! Dual-head network: token embedder, pre-norm self-attention encoder, a
//! reconstruction decoder (self-supervised head) and a blood-pressure
//! regressor (supervised head).

mod checkpoint;
mod grad;
mod loss;
mod model;
mod params;
mod pretrain;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
};
pub use grad::{backward, batch_loss, gradients, Objective, TrainItem};
pub use loss::{combined_loss, masked_mse, shrinkage, LossWeights, MaskSpec, ShrinkageParams};
pub use model::{forward_predict, forward_recon, predict_batch};
pub use params::{
    sgd_step, sgd_step_in_place, EncoderBlock, Geometry, GradientBundle, Head, LayerNorm, Linear,
    ModelParams,
};
pub use pretrain::{pretrain, PretrainConfig, PretrainReport};
