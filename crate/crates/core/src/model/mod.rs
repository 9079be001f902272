//! The eight encoder-decoder configurations: vanilla RNN / GRU / LSTM stacks
//! with no attention or additive soft attention, and the multi-head
//! self-attention (Transformer) variant, at character or subword level.

mod attention;
mod cells;
mod recurrent;
mod transformer;

pub use attention::{soft_attention, AttentionScoring, SoftAttentionParams};
pub use cells::{gru_cell_step, lstm_cell_step, rnn_cell_step, CellState};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{BoundParams, ParamError, ParamSet};
use crate::segment::Vocabulary;
use crate::tape::{AutogradError, Tape};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("empty source sequence")]
    EmptySource,
    #[error("symbol id {id} out of range for vocabulary of size {vocab}")]
    SymbolOutOfRange { id: u32, vocab: usize },
    #[error("decoder state does not match this model configuration")]
    StateMismatch,
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Character,
    Subword,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    None,
    Soft,
    MultiHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    VanillaRnn,
    Gru,
    Lstm,
    SelfAttention,
}

/// Complete architectural description of one network. `num_layers` counts
/// encoder and decoder layers separately (6 means 6 + 6).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub level: Level,
    pub attention: AttentionKind,
    pub architecture: Architecture,
    pub num_layers: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub tie_output_embeddings: bool,
    pub vocab_size: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub attention_scoring: AttentionScoring,
}

fn default_dropout() -> f64 {
    0.1
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(ModelError::Config(msg));
        if (self.attention == AttentionKind::MultiHead)
            != (self.architecture == Architecture::SelfAttention)
        {
            return err(format!(
                "multi-head attention and the self-attention architecture imply each other \
                 (attention {:?}, architecture {:?})",
                self.attention, self.architecture
            ));
        }
        if self.architecture == Architecture::SelfAttention {
            if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
                return err(format!(
                    "embed_dim {} must be divisible by num_heads {}",
                    self.embed_dim, self.num_heads
                ));
            }
            if self.ffn_dim == 0 {
                return err("ffn_dim must be positive".into());
            }
        }
        if self.num_layers == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return err("num_layers, embed_dim and hidden_dim must be positive".into());
        }
        if self.vocab_size <= Vocabulary::SPECIALS.len() {
            return err(format!(
                "vocab_size {} leaves no room for regular symbols",
                self.vocab_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    fn is_transformer(&self) -> bool {
        self.architecture == Architecture::SelfAttention
    }
}

/// Width/depth profiles: `full` is the full-size configuration (6 layers,
/// 512-dim embeddings), `toy` its desk-scale counterpart, `tiny` for
/// gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimProfile {
    pub num_layers: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl DimProfile {
    pub fn full() -> Self {
        DimProfile {
            num_layers: 6,
            embed_dim: 512,
            hidden_dim: 512,
            num_heads: 8,
            ffn_dim: 2048,
            dropout: 0.1,
        }
    }

    pub fn toy() -> Self {
        DimProfile {
            num_layers: 2,
            embed_dim: 64,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            dropout: 0.1,
        }
    }

    pub fn tiny() -> Self {
        DimProfile {
            num_layers: 2,
            embed_dim: 8,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            dropout: 0.0,
        }
    }
}

/// The named model presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    NoAttRnn,
    NoAttGru,
    NoAttLstm,
    AttRnn,
    AttGru,
    AttLstm,
    Transformer,
    BpeSoft,
    BpeTransformer,
}

impl Preset {
    pub const ALL: [Preset; 9] = [
        Preset::NoAttRnn,
        Preset::NoAttGru,
        Preset::NoAttLstm,
        Preset::AttRnn,
        Preset::AttGru,
        Preset::AttLstm,
        Preset::Transformer,
        Preset::BpeSoft,
        Preset::BpeTransformer,
    ];

    /// The eight core configurations.
    pub const CORE: [Preset; 8] = [
        Preset::NoAttRnn,
        Preset::NoAttGru,
        Preset::NoAttLstm,
        Preset::AttRnn,
        Preset::AttGru,
        Preset::AttLstm,
        Preset::Transformer,
        Preset::BpeSoft,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::NoAttRnn => "NoAtt-RNN",
            Preset::NoAttGru => "NoAtt-GRU",
            Preset::NoAttLstm => "NoAtt-LSTM",
            Preset::AttRnn => "Att-RNN",
            Preset::AttGru => "Att-GRU",
            Preset::AttLstm => "Att-LSTM",
            Preset::Transformer => "Transformer",
            Preset::BpeSoft => "BPE-Soft",
            Preset::BpeTransformer => "BPE-Transformer",
        }
    }

    pub fn parse(name: &str) -> Option<Preset> {
        Preset::ALL.iter().copied().find(|p| p.name().eq_ignore_ascii_case(name))
    }

    pub fn level(&self) -> Level {
        match self {
            Preset::BpeSoft | Preset::BpeTransformer => Level::Subword,
            _ => Level::Character,
        }
    }

    pub fn attention(&self) -> AttentionKind {
        match self {
            Preset::NoAttRnn | Preset::NoAttGru | Preset::NoAttLstm => AttentionKind::None,
            Preset::AttRnn | Preset::AttGru | Preset::AttLstm | Preset::BpeSoft => {
                AttentionKind::Soft
            }
            Preset::Transformer | Preset::BpeTransformer => AttentionKind::MultiHead,
        }
    }

    /// Subword soft-attention models run on LSTMs.
    pub fn architecture(&self) -> Architecture {
        match self {
            Preset::NoAttRnn | Preset::AttRnn => Architecture::VanillaRnn,
            Preset::NoAttGru | Preset::AttGru => Architecture::Gru,
            Preset::NoAttLstm | Preset::AttLstm | Preset::BpeSoft => Architecture::Lstm,
            Preset::Transformer | Preset::BpeTransformer => Architecture::SelfAttention,
        }
    }

    /// True for the presets that require a learned subword model.
    pub fn needs_bpe(&self) -> bool {
        self.level() == Level::Subword
    }

    pub fn config(&self, dims: &DimProfile, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            level: self.level(),
            attention: self.attention(),
            architecture: self.architecture(),
            num_layers: dims.num_layers,
            embed_dim: dims.embed_dim,
            hidden_dim: dims.hidden_dim,
            num_heads: dims.num_heads,
            ffn_dim: dims.ffn_dim,
            tie_output_embeddings: true,
            vocab_size,
            dropout: dims.dropout,
            attention_scoring: AttentionScoring::Additive,
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Preset {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Preset> {
        Preset::parse(s).ok_or_else(|| {
            ModelError::Config(format!(
                "unknown preset {:?}; expected one of {}",
                s,
                Preset::ALL.map(|p| p.name()).join(", ")
            ))
        })
    }
}

/// Forward-pass context: the recording tape plus training-time state.
pub(crate) struct Fwd<'a, F: Scalar> {
    pub tape: &'a Tape<F>,
    pub train: bool,
    pub dropout: f64,
    pub rng: &'a mut dyn RngCore,
}

impl<'a, F: Scalar> Fwd<'a, F> {
    pub fn apply_dropout(&mut self, x: &Tensor<F>) -> std::result::Result<Tensor<F>, AutogradError> {
        if self.train && self.dropout > 0.0 {
            self.tape.dropout(x, self.dropout, self.rng)
        } else {
            Ok(x.clone())
        }
    }
}

/// Parameter access that works both for tape-bound and raw parameters.
pub(crate) enum ParamsView<'a, F: Scalar> {
    Bound(&'a BoundParams<F>),
    Raw(&'a ParamSet<F>),
}

impl<'a, F: Scalar> ParamsView<'a, F> {
    pub fn get(&self, name: &str) -> &Tensor<F> {
        match self {
            ParamsView::Bound(b) => b.get(name),
            ParamsView::Raw(p) => p
                .get(name)
                .unwrap_or_else(|| panic!("parameter {:?} was never declared", name)),
        }
    }
}

/// Source sequence after encoding, in the representation the decoder needs.
pub enum EncodedSource<F: Scalar> {
    Recurrent { states: Vec<Tensor<F>>, summary: Tensor<F> },
    SelfAttention { states: Tensor<F>, summary: Tensor<F> },
}

impl<F: Scalar> EncodedSource<F> {
    /// Number of source positions.
    pub fn len(&self) -> usize {
        match self {
            EncodedSource::Recurrent { states, .. } => states.len(),
            EncodedSource::SelfAttention { states, .. } => states.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fixed-size summary vector (what a no-attention decoder conditions on).
    pub fn summary(&self) -> &Tensor<F> {
        match self {
            EncodedSource::Recurrent { summary, .. } => summary,
            EncodedSource::SelfAttention { summary, .. } => summary,
        }
    }

    /// One hidden vector per source position.
    pub fn per_position(&self) -> Result<Vec<Tensor<F>>> {
        match self {
            EncodedSource::Recurrent { states, .. } => Ok(states.clone()),
            EncodedSource::SelfAttention { states, .. } => {
                let tape = Tape::new();
                (0..states.shape()[0])
                    .map(|i| tape.slice_rows(states, i, 1).map_err(ModelError::from))
                    .collect()
            }
        }
    }
}

/// Decoder state carried across decode steps.
#[derive(Clone)]
pub enum DecoderState<F: Scalar> {
    Recurrent(Vec<CellState<F>>),
    /// Generated prefix (starts with BOS) for self-attention decoding.
    Prefix(Vec<u32>),
}

/// One teacher-forced batch: flat row-major id buffers, example-major.
/// All sources in a batch must share one length (length-bucketed batching);
/// targets are padded to the in-batch maximum and masked by weight.
#[derive(Debug, Clone)]
pub struct Batch {
    pub batch: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<u32>,
    pub tgt_in: Vec<u32>,
    pub tgt_out: Vec<u32>,
    pub tgt_weight: Vec<f64>,
}

impl Batch {
    /// Build from (source ids, target ids) pairs; sources must share one
    /// length. BOS/EOS framing is added here.
    pub fn new(pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<Batch> {
        if pairs.is_empty() {
            return Err(ModelError::EmptySource);
        }
        let src_len = pairs[0].0.len();
        if src_len == 0 {
            return Err(ModelError::EmptySource);
        }
        if pairs.iter().any(|(s, _)| s.len() != src_len) {
            return Err(ModelError::Config(
                "all sources in a batch must share one length".into(),
            ));
        }
        let tgt_len = pairs.iter().map(|(_, t)| t.len()).max().unwrap() + 1; // +1 for EOS
        let batch = pairs.len();
        let mut src = Vec::with_capacity(batch * src_len);
        let mut tgt_in = vec![Vocabulary::PAD; batch * tgt_len];
        let mut tgt_out = vec![Vocabulary::PAD; batch * tgt_len];
        let mut tgt_weight = vec![0.0; batch * tgt_len];
        for (b, (s, t)) in pairs.iter().enumerate() {
            src.extend_from_slice(s);
            for (i, slot) in tgt_in[b * tgt_len..b * tgt_len + t.len() + 1].iter_mut().enumerate() {
                *slot = if i == 0 { Vocabulary::BOS } else { t[i - 1] };
            }
            for (i, slot) in tgt_out[b * tgt_len..b * tgt_len + t.len() + 1].iter_mut().enumerate()
            {
                *slot = if i < t.len() { t[i] } else { Vocabulary::EOS };
            }
            for w in tgt_weight[b * tgt_len..b * tgt_len + t.len() + 1].iter_mut() {
                *w = 1.0;
            }
        }
        Ok(Batch { batch, src_len, tgt_len, src, tgt_in, tgt_out, tgt_weight })
    }

    /// Ids of one target-input column (time step) across the batch.
    pub(crate) fn tgt_in_column(&self, t: usize) -> Vec<u32> {
        (0..self.batch).map(|b| self.tgt_in[b * self.tgt_len + t]).collect()
    }
}

/// Row layout of the flat logits produced by a teacher-forced pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitLayout {
    /// Row `t * batch + b` (recurrent decoders).
    TimeMajor,
    /// Row `b * tgt_len + t` (self-attention decoders).
    BatchMajor,
}

impl LogitLayout {
    pub fn row(&self, b: usize, t: usize, batch: usize, tgt_len: usize) -> usize {
        match self {
            LogitLayout::TimeMajor => t * batch + b,
            LogitLayout::BatchMajor => b * tgt_len + t,
        }
    }
}

/// Output of one teacher-forced forward pass.
pub struct TeacherForced<F: Scalar> {
    /// Mean cross-entropy per target symbol (EOS included), in nats.
    pub loss: Tensor<F>,
    /// Flat `[rows, vocab]` logits; see `layout`.
    pub logits: Tensor<F>,
    pub layout: LogitLayout,
    /// Number of real (unpadded) target symbols in the batch.
    pub n_symbols: f64,
}

/// A constructed network: configuration plus its parameters.
pub struct Model<F: Scalar> {
    pub config: ModelConfig,
    pub params: ParamSet<F>,
}

impl<F: Scalar> Model<F> {
    /// Build a model with Glorot-initialized weights and zero biases,
    /// deterministically from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        declare_params(&config, &mut params, &mut rng)?;
        Ok(Model { config, params })
    }

    /// Assemble a model from existing parameters (checkpoint loading).
    pub fn from_parts(config: ModelConfig, params: ParamSet<F>) -> Result<Self> {
        config.validate()?;
        let mut expected = ParamSet::<F>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        declare_params(&config, &mut expected, &mut rng)?;
        for (name, tensor) in expected.iter() {
            match params.get(name) {
                Some(t) if t.shape() == tensor.shape() => {}
                Some(t) => {
                    return Err(ModelError::Config(format!(
                        "parameter {:?} has shape {:?}, expected {:?}",
                        name,
                        t.shape(),
                        tensor.shape()
                    )))
                }
                None => {
                    return Err(ModelError::Config(format!("missing parameter {:?}", name)))
                }
            }
        }
        if params.len() != expected.len() {
            return Err(ModelError::Config(format!(
                "parameter count {} does not match configuration ({} expected)",
                params.len(),
                expected.len()
            )));
        }
        Ok(Model { config, params })
    }

    /// Teacher-forced forward pass on `tape` with bound parameters.
    pub fn forward_batch(
        &self,
        tape: &Tape<F>,
        bound: &BoundParams<F>,
        batch: &Batch,
        train: bool,
        rng: &mut dyn RngCore,
        label_smoothing: f64,
    ) -> Result<TeacherForced<F>> {
        let mut fwd = Fwd { tape, train, dropout: self.config.dropout, rng };
        let p = ParamsView::Bound(bound);
        self.forward_with(&mut fwd, &p, batch, label_smoothing)
    }

    /// Evaluation pass: fresh tape, nothing recorded, no dropout.
    /// Returns (mean loss in nats per symbol, symbol count).
    pub fn eval_batch(&self, batch: &Batch) -> Result<(f64, f64)> {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fwd = Fwd { tape: &tape, train: false, dropout: 0.0, rng: &mut rng };
        let p = ParamsView::Raw(&self.params);
        let out = self.forward_with(&mut fwd, &p, batch, 0.0)?;
        Ok((out.loss.item().to_f64(), out.n_symbols))
    }

    /// Per-position logits of a teacher-forced pass over a single pair,
    /// without recording. Row `t` holds the logits that predict target
    /// position `t`.
    pub fn teacher_forced_logits(&self, src: &[u32], tgt: &[u32]) -> Result<Vec<Vec<f64>>> {
        let batch = Batch::new(&[(src.to_vec(), tgt.to_vec())])?;
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fwd = Fwd { tape: &tape, train: false, dropout: 0.0, rng: &mut rng };
        let p = ParamsView::Raw(&self.params);
        let out = self.forward_with(&mut fwd, &p, &batch, 0.0)?;
        let v = self.config.vocab_size;
        Ok((0..batch.tgt_len)
            .map(|t| {
                let row = out.layout.row(0, t, 1, batch.tgt_len);
                out.logits.data()[row * v..(row + 1) * v].iter().map(|x| x.to_f64()).collect()
            })
            .collect())
    }

    fn forward_with(
        &self,
        fwd: &mut Fwd<'_, F>,
        p: &ParamsView<'_, F>,
        batch: &Batch,
        label_smoothing: f64,
    ) -> Result<TeacherForced<F>> {
        self.check_ids(batch.src.iter().chain(&batch.tgt_in).chain(&batch.tgt_out))?;
        let (logits, layout) = if self.config.is_transformer() {
            let logits = transformer::teacher_logits(fwd, &self.config, p, batch)?;
            (logits, LogitLayout::BatchMajor)
        } else {
            let logits = recurrent::teacher_logits(fwd, &self.config, p, batch)?;
            (logits, LogitLayout::TimeMajor)
        };
        // Align targets with the logits row order.
        let n = batch.batch * batch.tgt_len;
        let mut targets = vec![0u32; n];
        let mut weights = vec![0.0f64; n];
        for b in 0..batch.batch {
            for t in 0..batch.tgt_len {
                let row = layout.row(b, t, batch.batch, batch.tgt_len);
                targets[row] = batch.tgt_out[b * batch.tgt_len + t];
                weights[row] = batch.tgt_weight[b * batch.tgt_len + t];
            }
        }
        let loss = fwd.tape.cross_entropy_mean(&logits, &targets, &weights, label_smoothing)?;
        let n_symbols: f64 = weights.iter().sum();
        Ok(TeacherForced { loss, logits, layout, n_symbols })
    }

    /// Encode a single source sequence (inference mode).
    pub fn encode(&self, src: &[u32]) -> Result<EncodedSource<F>> {
        if src.is_empty() {
            return Err(ModelError::EmptySource);
        }
        self.check_ids(src.iter())?;
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fwd = Fwd { tape: &tape, train: false, dropout: 0.0, rng: &mut rng };
        let p = ParamsView::Raw(&self.params);
        if self.config.is_transformer() {
            transformer::encode(&mut fwd, &self.config, &p, src)
        } else {
            recurrent::encode(&mut fwd, &self.config, &p, src)
        }
    }

    /// Initial decoder state for a freshly encoded source.
    pub fn initial_state(&self, enc: &EncodedSource<F>) -> Result<DecoderState<F>> {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fwd = Fwd { tape: &tape, train: false, dropout: 0.0, rng: &mut rng };
        let p = ParamsView::Raw(&self.params);
        match (self.config.is_transformer(), enc) {
            // The prefix starts empty; the first decode_step pushes BOS.
            (true, EncodedSource::SelfAttention { .. }) => Ok(DecoderState::Prefix(vec![])),
            (false, EncodedSource::Recurrent { summary, .. }) => Ok(DecoderState::Recurrent(
                recurrent::init_decoder_states(&mut fwd, &self.config, &p, summary)?,
            )),
            _ => Err(ModelError::StateMismatch),
        }
    }

    /// One decode step: consume `prev` and produce logits over the
    /// vocabulary plus the successor state.
    pub fn decode_step(
        &self,
        enc: &EncodedSource<F>,
        state: &DecoderState<F>,
        prev: u32,
    ) -> Result<(Tensor<F>, DecoderState<F>)> {
        self.check_ids(std::iter::once(&prev))?;
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fwd = Fwd { tape: &tape, train: false, dropout: 0.0, rng: &mut rng };
        let p = ParamsView::Raw(&self.params);
        match (state, enc) {
            (DecoderState::Recurrent(states), EncodedSource::Recurrent { states: keys, summary: _ }) => {
                let (logits, next) =
                    recurrent::decode_step(&mut fwd, &self.config, &p, keys, states, prev)?;
                Ok((logits, DecoderState::Recurrent(next)))
            }
            (DecoderState::Prefix(prefix), EncodedSource::SelfAttention { states, .. }) => {
                let mut next = prefix.clone();
                next.push(prev);
                let logits = transformer::decode_prefix(&mut fwd, &self.config, &p, states, &next)?;
                Ok((logits, DecoderState::Prefix(next)))
            }
            _ => Err(ModelError::StateMismatch),
        }
    }

    /// Attention weights a soft-attention decoder assigns over the source
    /// positions when consuming `prev` in `state` (diagnostic; `None` for
    /// configurations without soft attention).
    pub fn attention_weights(
        &self,
        enc: &EncodedSource<F>,
        state: &DecoderState<F>,
        prev: u32,
    ) -> Result<Option<Vec<f64>>> {
        if self.config.attention != AttentionKind::Soft {
            return Ok(None);
        }
        let (keys, states) = match (enc, state) {
            (EncodedSource::Recurrent { states: keys, .. }, DecoderState::Recurrent(states)) => {
                (keys, states)
            }
            _ => return Err(ModelError::StateMismatch),
        };
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fwd = Fwd { tape: &tape, train: false, dropout: 0.0, rng: &mut rng };
        let p = ParamsView::Raw(&self.params);
        let weights =
            recurrent::attention_weights(&mut fwd, &self.config, &p, keys, states, prev)?;
        Ok(Some(weights.to_f64_vec()))
    }

    fn check_ids<'a>(&self, ids: impl Iterator<Item = &'a u32>) -> Result<()> {
        for &id in ids {
            if id as usize >= self.config.vocab_size {
                return Err(ModelError::SymbolOutOfRange {
                    id,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }
}

/// Declare every parameter of a configuration in a fixed order.
fn declare_params<F: Scalar>(
    cfg: &ModelConfig,
    params: &mut ParamSet<F>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    use crate::params::glorot_uniform;
    let v = cfg.vocab_size;
    let e = cfg.embed_dim;
    params.insert("src_embed", glorot_uniform(v, e, rng))?;
    params.insert("tgt_embed", glorot_uniform(v, e, rng))?;
    params.insert("out.bias", Tensor::zeros(vec![v]))?;
    if !cfg.tie_output_embeddings {
        params.insert("out.w", glorot_uniform(e, v, rng))?;
    }
    if cfg.is_transformer() {
        transformer::declare(cfg, params, rng)?;
    } else {
        recurrent::declare(cfg, params, rng)?;
    }
    Ok(())
}
