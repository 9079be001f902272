//! Historical spelling normalization with neural sequence models.
//!
//! Token-level encoder-decoder models (vanilla RNN / GRU / LSTM stacks with
//! or without soft attention, and a multi-head self-attention variant) over
//! character or BPE-subword symbols, trained with Adam under a linear
//! warmup, decoded by beam search, optionally combined with an
//! unchanged-spelling lexicon, and evaluated by word accuracy and
//! Levenshtein-based character error rate.
//!
//! The crate is organized along the pipeline:
//!
//! * [`tensor`] / [`tape`] — dense tensors and tape-based reverse-mode
//!   differentiation
//! * [`params`] / [`optim`] — parameter registry, Adam, warmup schedule
//! * [`model`] — the network configurations
//! * [`segment`] — character and BPE segmentation, vocabularies
//! * [`data`] — TSV corpora, statistics, resplitting, the casing policy
//! * [`train`] — the training regime with checkpointing and early stopping
//! * [`decode`] — beam search, greedy decoding, the hybrid lexicon method
//! * [`eval`] — metrics and error taxonomy
//! * [`checkpoint`] — self-describing checkpoint files
//! * [`synth`] — deterministic synthetic corpora for benchmarks

pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod eval;
pub mod model;
pub mod optim;
pub mod params;
pub mod segment;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use model::{Model, ModelConfig, Preset};
pub use segment::{BpeModel, Segmenter, Vocabulary};
pub use tensor::{Scalar, Tensor};
