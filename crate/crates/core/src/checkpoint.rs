//! Self-describing checkpoint files.
//!
//! Layout: an 8-byte magic, a little-endian u64 header length, a JSON header
//! (model configuration, full vocabulary, optional BPE merges, training
//! metadata, and a tensor directory), then the raw parameter payload as
//! little-endian floats in directory order. Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelConfig, ModelError};
use crate::params::{ParamError, ParamSet};
use crate::segment::{BpeModel, Segmenter, VocabError, Vocabulary};
use crate::model::Level;
use crate::tensor::{Dtype, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"HNCKPT01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file: {0}")]
    BadMagic(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("checkpoint holds {found} data but {expected} was requested")]
    WrongDtype { found: Dtype, expected: Dtype },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

/// Training provenance stored with the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub update_step: u64,
    pub dev_cross_entropy: f64,
    pub dev_perplexity: f64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    numel: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: Dtype,
    model: ModelConfig,
    vocab: Vec<String>,
    bpe_merges: Option<Vec<(String, String)>>,
    meta: TrainMeta,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to resume or serve a model.
pub struct Checkpoint<F: Scalar> {
    pub model: Model<F>,
    pub vocab: Vocabulary,
    pub bpe: Option<BpeModel>,
    pub meta: TrainMeta,
}

impl<F: Scalar> Checkpoint<F> {
    /// The segmenter this checkpoint's model was trained with.
    pub fn segmenter(&self) -> Segmenter {
        match (&self.model.config.level, &self.bpe) {
            (Level::Subword, Some(bpe)) => Segmenter::Bpe(bpe.clone()),
            _ => Segmenter::Character,
        }
    }
}

pub fn save<F: Scalar>(
    path: impl AsRef<Path>,
    model: &Model<F>,
    vocab: &Vocabulary,
    bpe: Option<&BpeModel>,
    meta: &TrainMeta,
) -> Result<(), CheckpointError> {
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut offset = 0usize;
    for (name, t) in model.params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            numel: t.numel(),
        });
        offset += t.numel();
    }
    let header = Header {
        format_version: 1,
        dtype: F::DTYPE,
        model: model.config.clone(),
        vocab: vocab.symbols().to_vec(),
        bpe_merges: bpe.map(|b| b.merges().to_vec()),
        meta: meta.clone(),
        tensors,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header_json.len() + offset * F::BYTE_WIDTH);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, t) in model.params.iter() {
        for &v in t.data() {
            v.push_le_bytes(&mut out);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load<F: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<F>, CheckpointError> {
    let bytes = fs::read(&path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic(path.as_ref().display().to_string()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16 + header_len;
    if bytes.len() < payload_start {
        return Err(CheckpointError::Corrupt("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])?;
    if header.dtype != F::DTYPE {
        return Err(CheckpointError::WrongDtype { found: header.dtype, expected: F::DTYPE });
    }
    let payload = &bytes[payload_start..];
    let mut params = ParamSet::new();
    for entry in &header.tensors {
        let start = entry.offset * F::BYTE_WIDTH;
        let end = start + entry.numel * F::BYTE_WIDTH;
        if end > payload.len() {
            return Err(CheckpointError::Corrupt(format!(
                "tensor {:?} extends past the payload",
                entry.name
            )));
        }
        let data: Vec<F> = payload[start..end]
            .chunks_exact(F::BYTE_WIDTH)
            .map(F::from_le_slice)
            .collect();
        let tensor = Tensor::from_vec(entry.shape.clone(), data)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        params.insert(entry.name.clone(), tensor)?;
    }
    let vocab = Vocabulary::from_full_symbol_list(&header.vocab)?;
    if vocab.size() != header.model.vocab_size {
        return Err(CheckpointError::Corrupt(format!(
            "vocabulary has {} symbols but the model expects {}",
            vocab.size(),
            header.model.vocab_size
        )));
    }
    let model = Model::from_parts(header.model, params)?;
    let bpe = header.bpe_merges.map(BpeModel::from_merges);
    Ok(Checkpoint { model, vocab, bpe, meta: header.meta })
}
