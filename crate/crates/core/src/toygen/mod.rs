//! Toy chunk-wise autoregressive few-step generator.

mod checkpoint;
mod model;
mod pretrain;
mod sampler;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use model::{Block, ContextCache, ModelDims, ModelParams};
pub use pretrain::{denoising_mse, pretrain_reference, DataProcess, PretrainConfig, PretrainOutcome};
pub use sampler::{
    rollout_from, rollout_sequence, sample_chunk, ChunkTrajectory, SamplerConfig, SamplerKind, SequenceLatents,
    StepRecord,
};
