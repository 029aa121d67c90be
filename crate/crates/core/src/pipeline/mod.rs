//! Everything around the models: audio files, degradation, optimizers,
//! checkpoints, configuration, the toy corpus and the training loops.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod degrade;
pub mod optim;
pub mod train;
pub mod wav;

pub use checkpoint::Checkpoint;
pub use config::{Config, Stage, TrainConfig};
pub use degrade::{degrade, DegradationSpec, DegradeKind, DegradeMeta};
pub use optim::{lr_schedule, Adam, AdamConfig};
pub use train::{CodecTrainer, DiffusionTrainer, Restorer, RunDir, StepLog};
pub use wav::{load_wav, save_wav, AudioClip};

/// RNG stream reserved for parameter initialization; training steps use
/// streams `0..steps`.
pub const INIT_STREAM: u64 = 1 << 48;

/// Zero-pads `x` at the end to a multiple of `multiple` and to at least
/// `min_len` samples.
pub fn pad_to_multiple(x: &[f32], multiple: usize, min_len: usize) -> Vec<f32> {
    let target = x.len().max(min_len).div_ceil(multiple.max(1)) * multiple.max(1);
    let mut v = x.to_vec();
    v.resize(target, 0.0);
    v
}
