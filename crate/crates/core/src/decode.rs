//! Beam-search and greedy generation, plus the hybrid method that copies
//! spellings found unchanged in training and falls back to the model
//! otherwise.
//!
//! Beam entries hold either frozen finished hypotheses or extendable
//! prefixes; every step expands the prefixes over the whole vocabulary,
//! keeps the `beam_size` best by cumulative log-probability, and stops once
//! the top-ranked entry is finished (extensions never increase a score).
//! A prefix that reaches `max_len` takes the end symbol with its actual
//! log-probability and is flagged as forced.

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use crate::data::TokenPair;
use crate::model::{DecoderState, EncodedSource, Model, ModelError};
use crate::segment::{SegmentError, Segmenter, Vocabulary};
use crate::tensor::{log_softmax_row_f64, Scalar};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("beam size must be positive")]
    ZeroBeam,
    #[error("max_len must be positive")]
    ZeroMaxLen,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
}

type Result<T> = std::result::Result<T, DecodeError>;

/// A model's step interface as beam search sees it: log-probability rows
/// over the target vocabulary, conditioned on the generated prefix.
pub trait StepScorer {
    type State: Clone;

    fn vocab_size(&self) -> usize;
    fn eos_id(&self) -> u32;
    /// State after consuming begin-of-sequence, plus log-probabilities for
    /// the first output symbol.
    fn start(&self) -> Result<(Self::State, Vec<f64>)>;
    /// Consume `symbol`; return the successor state and the next
    /// log-probability row.
    fn step(&self, state: &Self::State, symbol: u32) -> Result<(Self::State, Vec<f64>)>;
}

/// Decoded hypothesis: content symbols (no BOS/EOS), cumulative
/// log-probability including the end symbol, and whether the end symbol was
/// forced at the length horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub ids: Vec<u32>,
    pub score: f64,
    pub forced_eos: bool,
}

struct Entry<S> {
    ids: Vec<u32>,
    score: f64,
    finished: bool,
    forced: bool,
    /// Present only while extendable.
    state: Option<(S, Vec<f64>)>,
    /// Arrival order, for deterministic tie-breaking.
    order: usize,
}

fn ranked_score(score: f64, content_len: usize, length_norm: f64) -> f64 {
    if length_norm == 0.0 {
        score
    } else {
        // Normalize by sequence length including the end symbol.
        score / ((content_len + 1) as f64).powf(length_norm)
    }
}

/// Standard beam search. `length_norm` = 0 ranks by raw score sums (the
/// default); a positive exponent divides scores by `len^length_norm`.
pub fn beam_search<S: StepScorer>(
    scorer: &S,
    beam_size: usize,
    max_len: usize,
    length_norm: f64,
) -> Result<DecodeResult> {
    if beam_size == 0 {
        return Err(DecodeError::ZeroBeam);
    }
    if max_len == 0 {
        return Err(DecodeError::ZeroMaxLen);
    }
    let eos = scorer.eos_id();
    let vocab = scorer.vocab_size();
    let mut next_order = 0usize;
    let (state0, lp0) = scorer.start()?;
    let mut entries: Vec<Entry<S::State>> = vec![Entry {
        ids: Vec::new(),
        score: 0.0,
        finished: false,
        forced: false,
        state: Some((state0, lp0)),
        order: next_order,
    }];
    next_order += 1;

    loop {
        // Rank current entries; stop when the best is finished (no
        // extension can beat it: log-probabilities are non-positive).
        entries.sort_by(|a, b| {
            let ra = ranked_score(a.score, a.ids.len(), length_norm);
            let rb = ranked_score(b.score, b.ids.len(), length_norm);
            rb.partial_cmp(&ra).unwrap().then(a.order.cmp(&b.order))
        });
        let stop_on_top = length_norm == 0.0 && entries[0].finished;
        let all_finished = entries.iter().all(|e| e.finished);
        let at_horizon = entries
            .iter()
            .filter(|e| !e.finished)
            .map(|e| e.ids.len())
            .max()
            .is_some_and(|l| l >= max_len);
        if stop_on_top || all_finished {
            let best = &entries[0];
            return Ok(DecodeResult { ids: best.ids.clone(), score: best.score, forced_eos: best.forced });
        }
        if at_horizon {
            // Force the end symbol (scored) on every remaining prefix.
            for e in entries.iter_mut().filter(|e| !e.finished) {
                let (_, lp) = e.state.take().expect("unfinished entries hold state");
                e.score += lp[eos as usize];
                e.finished = true;
                e.forced = true;
            }
            continue;
        }

        // Candidate pool: carried finished entries plus all expansions.
        struct Cand {
            parent: usize,
            symbol: Option<u32>,
            score: f64,
        }
        let mut cands: Vec<Cand> = Vec::new();
        for (i, e) in entries.iter().enumerate() {
            if e.finished {
                cands.push(Cand { parent: i, symbol: None, score: e.score });
            } else {
                let (_, lp) = e.state.as_ref().unwrap();
                for sym in 0..vocab as u32 {
                    let l = lp[sym as usize];
                    if l == f64::NEG_INFINITY {
                        continue;
                    }
                    cands.push(Cand { parent: i, symbol: Some(sym), score: e.score + l });
                }
            }
        }
        cands.sort_by(|a, b| {
            let ra = ranked_score(
                a.score,
                entries[a.parent].ids.len() + usize::from(a.symbol.is_some() && a.symbol != Some(eos)),
                length_norm,
            );
            let rb = ranked_score(
                b.score,
                entries[b.parent].ids.len() + usize::from(b.symbol.is_some() && b.symbol != Some(eos)),
                length_norm,
            );
            rb.partial_cmp(&ra)
                .unwrap()
                .then(entries[a.parent].order.cmp(&entries[b.parent].order))
                .then(a.symbol.cmp(&b.symbol))
        });
        cands.truncate(beam_size);

        let mut next: Vec<Entry<S::State>> = Vec::with_capacity(cands.len());
        for c in cands {
            let parent = &entries[c.parent];
            match c.symbol {
                None => next.push(Entry {
                    ids: parent.ids.clone(),
                    score: parent.score,
                    finished: true,
                    forced: parent.forced,
                    state: None,
                    order: parent.order,
                }),
                Some(sym) if sym == eos => {
                    next.push(Entry {
                        ids: parent.ids.clone(),
                        score: c.score,
                        finished: true,
                        forced: false,
                        state: None,
                        order: next_order,
                    });
                    next_order += 1;
                }
                Some(sym) => {
                    let (parent_state, _) = parent.state.as_ref().unwrap();
                    let (state, lp) = scorer.step(parent_state, sym)?;
                    let mut ids = parent.ids.clone();
                    ids.push(sym);
                    next.push(Entry {
                        ids,
                        score: c.score,
                        finished: false,
                        forced: false,
                        state: Some((state, lp)),
                        order: next_order,
                    });
                    next_order += 1;
                }
            }
        }
        entries = next;
    }
}

/// Follow the highest-probability symbol at every step (ties to the lowest
/// id); equivalent to beam search with width 1.
pub fn greedy_decode<S: StepScorer>(scorer: &S, max_len: usize) -> Result<DecodeResult> {
    if max_len == 0 {
        return Err(DecodeError::ZeroMaxLen);
    }
    let eos = scorer.eos_id();
    let (mut state, mut lp) = scorer.start()?;
    let mut ids = Vec::new();
    let mut score = 0.0;
    loop {
        let mut best_sym = 0u32;
        let mut best = f64::NEG_INFINITY;
        for (sym, &l) in lp.iter().enumerate() {
            if l > best {
                best = l;
                best_sym = sym as u32;
            }
        }
        if best_sym == eos {
            return Ok(DecodeResult { ids, score: score + best, forced_eos: false });
        }
        if ids.len() >= max_len {
            return Ok(DecodeResult {
                ids,
                score: score + lp[eos as usize],
                forced_eos: true,
            });
        }
        score += best;
        ids.push(best_sym);
        let (next_state, next_lp) = scorer.step(&state, best_sym)?;
        state = next_state;
        lp = next_lp;
    }
}

/// [`StepScorer`] over a trained model and one encoded source. PAD, BOS and
/// UNK can never be emitted: their logits are masked to negative infinity.
pub struct NeuralScorer<'a, F: Scalar> {
    model: &'a Model<F>,
    source: EncodedSource<F>,
}

impl<'a, F: Scalar> NeuralScorer<'a, F> {
    pub fn new(model: &'a Model<F>, source: EncodedSource<F>) -> Self {
        NeuralScorer { model, source }
    }

    fn masked_logprobs(&self, logits: &crate::tensor::Tensor<F>) -> Vec<f64> {
        let mut row = logits.to_f64_vec();
        row[Vocabulary::PAD as usize] = f64::NEG_INFINITY;
        row[Vocabulary::BOS as usize] = f64::NEG_INFINITY;
        row[Vocabulary::UNK as usize] = f64::NEG_INFINITY;
        log_softmax_row_f64(&row)
    }
}

impl<'a, F: Scalar> StepScorer for NeuralScorer<'a, F> {
    type State = DecoderState<F>;

    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn eos_id(&self) -> u32 {
        Vocabulary::EOS
    }

    fn start(&self) -> Result<(Self::State, Vec<f64>)> {
        let state = self.model.initial_state(&self.source)?;
        let (logits, state) = self.model.decode_step(&self.source, &state, Vocabulary::BOS)?;
        Ok((state, self.masked_logprobs(&logits)))
    }

    fn step(&self, state: &Self::State, symbol: u32) -> Result<(Self::State, Vec<f64>)> {
        let (logits, next) = self.model.decode_step(&self.source, state, symbol)?;
        Ok((next, self.masked_logprobs(&logits)))
    }
}

/// Membership policy for the unchanged-spelling lexicon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LexiconPolicy {
    /// Every historical form seen at least once unchanged.
    AnyUnchanged,
    /// Only forms whose unchanged count strictly exceeds their changed count.
    #[default]
    Majority,
}

/// Historical spellings designated copy-through, with the occurrence counts
/// behind the decision.
#[derive(Debug, Clone)]
pub struct UnchangedLexicon {
    members: HashSet<String>,
    counts: HashMap<String, (u64, u64)>,
    policy: LexiconPolicy,
    case_fold: bool,
}

impl UnchangedLexicon {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn policy(&self) -> LexiconPolicy {
        self.policy
    }

    /// Exact (case-sensitive unless built with folding) membership test.
    pub fn contains(&self, token: &str) -> bool {
        if self.case_fold {
            self.members.contains(&token.to_lowercase())
        } else {
            self.members.contains(token)
        }
    }

    /// (unchanged, changed) training occurrences of a historical form.
    pub fn counts(&self, token: &str) -> Option<(u64, u64)> {
        let key = if self.case_fold { token.to_lowercase() } else { token.to_string() };
        self.counts.get(&key).copied()
    }
}

/// Extract the unchanged-spelling lexicon from training pairs. Lookup is
/// case-sensitive by default; `case_fold` folds both counting and lookup.
pub fn build_unchanged_lexicon(
    train_pairs: &[TokenPair],
    policy: LexiconPolicy,
    case_fold: bool,
) -> UnchangedLexicon {
    let mut counts: HashMap<String, (u64, u64)> = HashMap::new();
    for p in train_pairs {
        let key = if case_fold { p.historical.to_lowercase() } else { p.historical.clone() };
        let unchanged = if case_fold {
            p.historical.to_lowercase() == p.modern.to_lowercase()
        } else {
            p.is_unchanged()
        };
        let slot = counts.entry(key).or_insert((0, 0));
        if unchanged {
            slot.0 += 1;
        } else {
            slot.1 += 1;
        }
    }
    let members = counts
        .iter()
        .filter(|(_, &(unchanged, changed))| match policy {
            LexiconPolicy::AnyUnchanged => unchanged >= 1,
            LexiconPolicy::Majority => unchanged > changed,
        })
        .map(|(k, _)| k.clone())
        .collect();
    UnchangedLexicon { members, counts, policy, case_fold }
}

/// How tokens are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    #[default]
    Neural,
    Hybrid,
}

/// Beam-search decoding of raw tokens against a trained model, optionally
/// short-circuited by the unchanged-spelling lexicon.
pub struct Normalizer<'a, F: Scalar> {
    pub model: &'a Model<F>,
    pub vocab: &'a Vocabulary,
    pub segmenter: &'a Segmenter,
    pub lexicon: Option<&'a UnchangedLexicon>,
    pub beam_size: usize,
    pub length_norm: f64,
}

impl<'a, F: Scalar> Normalizer<'a, F> {
    /// Generous linear cap on generated symbols.
    fn max_len(src_len: usize) -> usize {
        3 * src_len + 5
    }

    /// Neural-only normalization of one token.
    pub fn neural_normalize(&self, token: &str) -> Result<String> {
        let symbols = self.segmenter.segment(token)?;
        let ids = self.vocab.encode(&symbols);
        let source = self.model.encode(&ids)?;
        let scorer = NeuralScorer::new(self.model, source);
        let result = beam_search(&scorer, self.beam_size, Self::max_len(ids.len()), self.length_norm)?;
        if result.forced_eos {
            log::warn!("no hypothesis finished within the length cap for {token:?}");
        }
        let pieces = self.vocab.decode(&result.ids);
        Ok(join_prediction(&pieces, self.segmenter))
    }

    /// Copy lexicon hits through verbatim; decode everything else. The
    /// model is never consulted for a hit.
    pub fn hybrid_normalize(&self, token: &str) -> Result<String> {
        if let Some(lexicon) = self.lexicon {
            if lexicon.contains(token) {
                return Ok(token.to_string());
            }
        }
        self.neural_normalize(token)
    }

    pub fn normalize_token(&self, token: &str, mode: DecodeMode) -> Result<String> {
        match mode {
            DecodeMode::Neural => self.neural_normalize(token),
            DecodeMode::Hybrid => self.hybrid_normalize(token),
        }
    }

    /// One prediction per input token, order preserved.
    pub fn normalize_batch(&self, tokens: &[String], mode: DecodeMode) -> Result<Vec<String>> {
        tokens.iter().map(|t| self.normalize_token(t, mode)).collect()
    }
}

/// Join predicted pieces into a surface token. Model output is free-form,
/// so at subword level every word-end marker occurrence is dropped.
fn join_prediction(pieces: &[String], segmenter: &Segmenter) -> String {
    match segmenter {
        Segmenter::Character => pieces.concat(),
        Segmenter::Bpe(_) => pieces.concat().replace(crate::segment::WORD_END, ""),
    }
}
