//! Recurrent encoder-decoder wiring shared by the vanilla RNN, GRU, and
//! LSTM configurations.
//!
//! The first encoder layer runs bidirectionally (forward and backward cells,
//! states concatenated and projected back to `hidden_dim`); upper layers are
//! unidirectional. Decoders initialize every layer's state from a learned
//! affine map of the encoder summary; with soft attention each step also
//! attends over the per-position encoder states and feeds the context into
//! the output path. Without attention, the summary is the only encoder
//! signal.

use rand::Rng;

use crate::params::{glorot_uniform, ParamError, ParamSet};
use crate::tensor::{Scalar, Tensor};

use super::attention::{soft_attention, SoftAttentionParams};
use super::cells::{cell_step, declare_cell, CellKind, CellState};
use super::{AttentionKind, Batch, EncodedSource, Fwd, ModelConfig, ModelError, ParamsView};

type Result<T> = std::result::Result<T, ModelError>;

fn kind(cfg: &ModelConfig) -> CellKind {
    CellKind::of(cfg.architecture).expect("recurrent wiring requires a recurrent cell")
}

pub(super) fn declare<F: Scalar, R: Rng>(
    cfg: &ModelConfig,
    params: &mut ParamSet<F>,
    rng: &mut R,
) -> std::result::Result<(), ParamError> {
    let k = kind(cfg);
    let (e, h) = (cfg.embed_dim, cfg.hidden_dim);
    declare_cell(params, "enc.l0.fwd", k, e, h, rng)?;
    declare_cell(params, "enc.l0.bwd", k, e, h, rng)?;
    params.insert("enc.l0.proj.w", glorot_uniform(2 * h, h, rng))?;
    params.insert("enc.l0.proj.b", Tensor::zeros(vec![h]))?;
    for l in 1..cfg.num_layers {
        declare_cell(params, &format!("enc.l{l}"), k, h, h, rng)?;
    }
    for l in 0..cfg.num_layers {
        params.insert(format!("dec.init.l{l}.h.w"), glorot_uniform(h, h, rng))?;
        params.insert(format!("dec.init.l{l}.h.b"), Tensor::zeros(vec![h]))?;
        if k == CellKind::Lstm {
            params.insert(format!("dec.init.l{l}.c.w"), glorot_uniform(h, h, rng))?;
            params.insert(format!("dec.init.l{l}.c.b"), Tensor::zeros(vec![h]))?;
        }
    }
    for l in 0..cfg.num_layers {
        let in_dim = if l == 0 { e } else { h };
        declare_cell(params, &format!("dec.l{l}"), k, in_dim, h, rng)?;
    }
    if cfg.attention == AttentionKind::Soft {
        params.insert("att.wq", glorot_uniform(h, h, rng))?;
        params.insert("att.wk", glorot_uniform(h, h, rng))?;
        params.insert("att.b", Tensor::zeros(vec![h]))?;
        params.insert("att.v", glorot_uniform(h, 1, rng))?;
        params.insert("att.comb.w", glorot_uniform(2 * h, h, rng))?;
        params.insert("att.comb.b", Tensor::zeros(vec![h]))?;
    }
    params.insert("out.pre.w", glorot_uniform(h, e, rng))?;
    params.insert("out.pre.b", Tensor::zeros(vec![e]))?;
    Ok(())
}

fn attention_params<'a, F: Scalar>(
    cfg: &ModelConfig,
    p: &'a ParamsView<'a, F>,
) -> SoftAttentionParams<'a, F> {
    SoftAttentionParams {
        wq: p.get("att.wq"),
        wk: p.get("att.wk"),
        bias: p.get("att.b"),
        v: p.get("att.v"),
        scoring: cfg.attention_scoring,
    }
}

/// Run a stack of encoder layers over `[batch, embed]` inputs, one per
/// position. Returns the top layer's per-position states; the summary is the
/// final position's state.
fn encode_positions<F: Scalar>(
    fwd: &mut Fwd<'_, F>,
    cfg: &ModelConfig,
    p: &ParamsView<'_, F>,
    xs: &[Tensor<F>],
    batch: usize,
) -> Result<Vec<Tensor<F>>> {
    let k = kind(cfg);
    let h = cfg.hidden_dim;
    let s_len = xs.len();

    // Layer 0: bidirectional, concatenated, projected back to hidden_dim.
    let mut state = CellState::zeros(k, batch, h);
    let mut forward_states = Vec::with_capacity(s_len);
    for x in xs {
        state = cell_step(fwd, p, "enc.l0.fwd", k, x, &state)?;
        forward_states.push(state.hidden.clone());
    }
    let mut state = CellState::zeros(k, batch, h);
    let mut backward_states = vec![None; s_len];
    for (s, x) in xs.iter().enumerate().rev() {
        state = cell_step(fwd, p, "enc.l0.bwd", k, x, &state)?;
        backward_states[s] = Some(state.hidden.clone());
    }
    let proj_w = p.get("enc.l0.proj.w");
    let proj_b = p.get("enc.l0.proj.b");
    let mut layer: Vec<Tensor<F>> = Vec::with_capacity(s_len);
    for s in 0..s_len {
        let both = fwd.tape.concat(
            &[&forward_states[s], backward_states[s].as_ref().unwrap()],
            1,
        )?;
        layer.push(fwd.tape.bias_add(&fwd.tape.matmul(&both, proj_w)?, proj_b)?);
    }

    for l in 1..cfg.num_layers {
        let prefix = format!("enc.l{l}");
        let mut state = CellState::zeros(k, batch, h);
        let mut next = Vec::with_capacity(s_len);
        for x in &layer {
            let dropped = fwd.apply_dropout(x)?;
            state = cell_step(fwd, p, &prefix, k, &dropped, &state)?;
            next.push(state.hidden.clone());
        }
        layer = next;
    }
    Ok(layer)
}

/// Per-position embeddings of one source column-major batch.
fn embed_source<F: Scalar>(
    fwd: &mut Fwd<'_, F>,
    p: &ParamsView<'_, F>,
    src: &[u32],
    batch: usize,
    src_len: usize,
) -> Result<Vec<Tensor<F>>> {
    let table = p.get("src_embed");
    (0..src_len)
        .map(|s| {
            let ids: Vec<u32> = (0..batch).map(|b| src[b * src_len + s]).collect();
            let x = fwd.tape.embedding(table, &ids)?;
            fwd.apply_dropout(&x).map_err(ModelError::from)
        })
        .collect()
}

/// Encode one source sequence (batch of one).
pub(super) fn encode<F: Scalar>(
    fwd: &mut Fwd<'_, F>,
    cfg: &ModelConfig,
    p: &ParamsView<'_, F>,
    src: &[u32],
) -> Result<EncodedSource<F>> {
    let xs = embed_source(fwd, p, src, 1, src.len())?;
    let states = encode_positions(fwd, cfg, p, &xs, 1)?;
    let summary = states.last().expect("source is non-empty").clone();
    Ok(EncodedSource::Recurrent { states, summary })
}

/// Fresh decoder layer states from the encoder summary.
pub(super) fn init_decoder_states<F: Scalar>(
    fwd: &mut Fwd<'_, F>,
    cfg: &ModelConfig,
    p: &ParamsView<'_, F>,
    summary: &Tensor<F>,
) -> Result<Vec<CellState<F>>> {
    let k = kind(cfg);
    let mut states = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let hidden = fwd.tape.tanh(&fwd.tape.bias_add(
            &fwd.tape.matmul(summary, p.get(&format!("dec.init.l{l}.h.w")))?,
            p.get(&format!("dec.init.l{l}.h.b")),
        )?)?;
        let cell = if k == CellKind::Lstm {
            Some(fwd.tape.tanh(&fwd.tape.bias_add(
                &fwd.tape.matmul(summary, p.get(&format!("dec.init.l{l}.c.w")))?,
                p.get(&format!("dec.init.l{l}.c.b")),
            )?)?)
        } else {
            None
        };
        states.push(CellState { hidden, cell });
    }
    Ok(states)
}

/// Where the per-step decoder context comes from.
pub(super) enum ContextMode<'a, F: Scalar> {
    None,
    Soft { keys: &'a [Tensor<F>] },
    /// A caller-supplied context used at every step (test harness for
    /// comparing attention wirings).
    #[cfg(test)]
    Fixed(&'a Tensor<F>),
}

/// One decoder step over all layers, then the output head.
/// Returns (logits, new states).
fn step_and_project<F: Scalar>(
    fwd: &mut Fwd<'_, F>,
    cfg: &ModelConfig,
    p: &ParamsView<'_, F>,
    context: &ContextMode<'_, F>,
    projected_keys: Option<&[Tensor<F>]>,
    states: &[CellState<F>],
    x: &Tensor<F>,
) -> Result<(Tensor<F>, Vec<CellState<F>>)> {
    let k = kind(cfg);
    let mut next_states = Vec::with_capacity(states.len());
    let mut input = x.clone();
    for (l, state) in states.iter().enumerate() {
        if l > 0 {
            input = fwd.apply_dropout(&input)?;
        }
        let new_state = cell_step(fwd, p, &format!("dec.l{l}"), k, &input, state)?;
        input = new_state.hidden.clone();
        next_states.push(new_state);
    }
    let h_top = input;
    let combined = match context {
        ContextMode::None => h_top,
        ContextMode::Soft { keys } => {
            let att = attention_params(cfg, p);
            let projected;
            let projected_ref = match projected_keys {
                Some(pk) => pk,
                None => {
                    projected = att.project_keys(fwd.tape, keys)?;
                    &projected
                }
            };
            let (ctx, _weights) = soft_attention(fwd.tape, &h_top, keys, projected_ref, &att)?;
            combine_context(fwd, p, &h_top, &ctx)?
        }
        #[cfg(test)]
        ContextMode::Fixed(ctx) => combine_context(fwd, p, &h_top, ctx)?,
    };
    let pre = fwd
        .tape
        .bias_add(&fwd.tape.matmul(&combined, p.get("out.pre.w"))?, p.get("out.pre.b"))?;
    let logits = if cfg.tie_output_embeddings {
        fwd.tape.bias_add(&fwd.tape.matmul_nt(&pre, p.get("tgt_embed"))?, p.get("out.bias"))?
    } else {
        fwd.tape.bias_add(&fwd.tape.matmul(&pre, p.get("out.w"))?, p.get("out.bias"))?
    };
    Ok((logits, next_states))
}

fn combine_context<F: Scalar>(
    fwd: &mut Fwd<'_, F>,
    p: &ParamsView<'_, F>,
    h_top: &Tensor<F>,
    ctx: &Tensor<F>,
) -> Result<Tensor<F>> {
    let cat = fwd.tape.concat(&[h_top, ctx], 1)?;
    Ok(fwd.tape.tanh(
        &fwd.tape.bias_add(&fwd.tape.matmul(&cat, p.get("att.comb.w"))?, p.get("att.comb.b"))?,
    )?)
}

/// Teacher-forced logits for a whole batch, time-major `[tgt_len * batch, vocab]`.
pub(super) fn teacher_logits<F: Scalar>(
    fwd: &mut Fwd<'_, F>,
    cfg: &ModelConfig,
    p: &ParamsView<'_, F>,
    batch: &Batch,
) -> Result<Tensor<F>> {
    let xs = embed_source(fwd, p, &batch.src, batch.batch, batch.src_len)?;
    let enc_states = encode_positions(fwd, cfg, p, &xs, batch.batch)?;
    let summary = enc_states.last().expect("non-empty source").clone();
    let mut states = init_decoder_states(fwd, cfg, p, &summary)?;

    let use_attention = cfg.attention == AttentionKind::Soft;
    let projected = if use_attention {
        let att = attention_params(cfg, p);
        Some(att.project_keys(fwd.tape, &enc_states)?)
    } else {
        None
    };

    let table = p.get("tgt_embed").clone();
    let mut per_step = Vec::with_capacity(batch.tgt_len);
    for t in 0..batch.tgt_len {
        let ids = batch.tgt_in_column(t);
        let x = fwd.tape.embedding(&table, &ids)?;
        let x = fwd.apply_dropout(&x)?;
        let context = if use_attention {
            ContextMode::Soft { keys: &enc_states }
        } else {
            ContextMode::None
        };
        let (logits, next) =
            step_and_project(fwd, cfg, p, &context, projected.as_deref(), &states, &x)?;
        states = next;
        per_step.push(logits);
    }
    let refs: Vec<&Tensor<F>> = per_step.iter().collect();
    Ok(fwd.tape.concat(&refs, 0)?)
}

/// One inference decode step.
pub(super) fn decode_step<F: Scalar>(
    fwd: &mut Fwd<'_, F>,
    cfg: &ModelConfig,
    p: &ParamsView<'_, F>,
    enc_states: &[Tensor<F>],
    states: &[CellState<F>],
    prev: u32,
) -> Result<(Tensor<F>, Vec<CellState<F>>)> {
    if states.len() != cfg.num_layers {
        return Err(ModelError::StateMismatch);
    }
    let x = fwd.tape.embedding(p.get("tgt_embed"), &[prev])?;
    let context = match cfg.attention {
        AttentionKind::Soft => ContextMode::Soft { keys: enc_states },
        _ => ContextMode::None,
    };
    step_and_project(fwd, cfg, p, &context, None, states, &x)
}

/// Attention weights a soft-attention decoder would assign at this step:
/// run the cells on `prev`, score the encoder states with the resulting
/// query. Diagnostic only; the returned row is the `[1, positions]` weight
/// vector.
pub(super) fn attention_weights<F: Scalar>(
    fwd: &mut Fwd<'_, F>,
    cfg: &ModelConfig,
    p: &ParamsView<'_, F>,
    enc_states: &[Tensor<F>],
    states: &[CellState<F>],
    prev: u32,
) -> Result<Tensor<F>> {
    let k = kind(cfg);
    let x = fwd.tape.embedding(p.get("tgt_embed"), &[prev])?;
    let mut input = x;
    for (l, state) in states.iter().enumerate() {
        let new_state = cell_step(fwd, p, &format!("dec.l{l}"), k, &input, state)?;
        input = new_state.hidden.clone();
    }
    let att = attention_params(cfg, p);
    let projected = att.project_keys(fwd.tape, enc_states)?;
    let (_, weights) = soft_attention(fwd.tape, &input, enc_states, &projected, &att)?;
    Ok(weights)
}

/// Decode step with a caller-chosen context source (testing hook).
#[cfg(test)]
pub(super) fn decode_step_with_context<F: Scalar>(
    fwd: &mut Fwd<'_, F>,
    cfg: &ModelConfig,
    p: &ParamsView<'_, F>,
    context: &ContextMode<'_, F>,
    states: &[CellState<F>],
    prev: u32,
) -> Result<(Tensor<F>, Vec<CellState<F>>)> {
    let x = fwd.tape.embedding(p.get("tgt_embed"), &[prev])?;
    step_and_project(fwd, cfg, p, context, None, states, &x)
}
