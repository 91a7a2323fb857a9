//! Masked language model: encoder, masking collator, training loop and the
//! checkpoint file.

mod checkpoint;
mod collate;
mod config;
mod model;
mod ops;
mod train;

pub use checkpoint::{fingerprint_bytes, Checkpoint, TrainMeta, FORMAT_VERSION, MAGIC};
pub use collate::{is_eligible, mask_collate, replacement_pool, MaskPolicy, MaskedBatch, MaskedSeq, Substitution};
pub use config::{LrSchedule, ModelConfig, TrainConfig};
pub use model::{Dense, EncoderLayer, MlmModel, Norm, Params, TrainSeq};
pub use train::{learning_rate, train, TrainReport, SUB_BATCH};
