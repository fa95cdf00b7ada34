//! Character-level neural machine translation: autodiff engine, BiLSTM and
//! hierarchical multiscale encoders, attentional decoder with beam search,
//! tokenizers, and training utilities.

pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod hm;
pub mod model;
pub mod nn;
pub mod params;
pub mod synthetic;
pub mod tensor;
pub mod tokenize;
pub mod train;

pub use decoder::{beam_search, BeamConfig, BeamOutput, Decoder, DecoderConfig};
pub use encoder::{EncoderConfig, PoolMode, PoolSpec};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use hm::{CompressionPenaltyConfig, HmConfig, HmMode, PenaltyForm, SlopeSchedule, ZMatrix};
pub use model::{Batch, ModelConfig, Seq2Seq};
pub use params::{ParamId, ParamKind, ParamStore};
pub use tensor::{Real, Tensor};
pub use tokenize::{learn_bpe, MergeList, VocabKind, Vocabulary};
pub use train::{build_batches, clip_gradients, Adam, AdamConfig, Pair, Scheduler, SchedulerConfig, Trainer, TrainingConfig};
pub use config::RunConfig;
pub use eval::{bleu, BleuReport, EvalReport};
