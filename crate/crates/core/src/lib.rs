//! End-to-end neural speaker diarization with Perceiver-based attractors.
//!
//! A self-attention frame encoder turns stacked filterbank-like features
//! into frame embeddings; a Perceiver decoder distils a fixed bank of
//! latents into speaker attractors whose dot products with the embeddings
//! give per-speaker activity. Everything runs on a small reverse-mode
//! autodiff engine in `numerics`.

pub mod assignment;
pub mod bench;
pub mod eda;
pub mod error;
pub mod frame_encoder;
pub mod inference;
pub mod kv;
pub mod losses;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod params;
pub mod perceiver;
pub mod rttm;
pub mod scoring;
pub mod simdata;
pub mod trainer;

pub use error::{Error, Result};
pub use frame_encoder::{EncoderConfig, FeatureSequence};
pub use inference::{diarize, infer_file, InferOptions};
pub use losses::{total_loss, LossFlags};
pub use model::{count_params, load_checkpoint, save_checkpoint, Checkpoint, DiaPer, ModelConfig, Prediction};
pub use nn::{AttentionNorm, Fwd};
pub use numerics::{Tape, Tensor, Var};
pub use params::ModelParams;
pub use perceiver::DecoderConfig;
pub use rttm::{Segment, SegmentList};
pub use scoring::{der, DerReport};
pub use simdata::ScConfig;
pub use trainer::{train, Mode, TrainConfig};
