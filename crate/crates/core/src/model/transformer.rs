//! Self-attention encoder-decoder: pre-layer-norm blocks, sinusoidal
//! position encodings, multi-head attention, and a ReLU feed-forward
//! sublayer. Decoder self-attention is causally masked; cross-attention
//! attends over the full encoder output.

use rand::Rng;

use crate::params::{glorot_uniform, ParamError, ParamSet};
use crate::tensor::{Scalar, Tensor};

use super::{Batch, EncodedSource, Fwd, ModelConfig, ModelError, ParamsView};

type Result<T> = std::result::Result<T, ModelError>;

pub(super) fn declare<F: Scalar, R: Rng>(
    cfg: &ModelConfig,
    params: &mut ParamSet<F>,
    rng: &mut R,
) -> std::result::Result<(), ParamError> {
    let e = cfg.embed_dim;
    let f = cfg.ffn_dim;
    let layer_norm = |params: &mut ParamSet<F>, name: String| {
        params.insert(format!("{name}.g"), Tensor::full(vec![e], F::ONE))?;
        params.insert(format!("{name}.b"), Tensor::zeros(vec![e]))
    };
    let attn = |params: &mut ParamSet<F>, name: String, rng: &mut R| {
        for proj in ["wq", "wk", "wv", "wo"] {
            params.insert(format!("{name}.{proj}"), glorot_uniform(e, e, rng))?;
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            params.insert(format!("{name}.{bias}"), Tensor::zeros(vec![e]))?;
        }
        Ok::<(), ParamError>(())
    };
    for l in 0..cfg.num_layers {
        layer_norm(params, format!("enc.l{l}.ln1"))?;
        attn(params, format!("enc.l{l}.attn"), rng)?;
        layer_norm(params, format!("enc.l{l}.ln2"))?;
        params.insert(format!("enc.l{l}.ffn.w1"), glorot_uniform(e, f, rng))?;
        params.insert(format!("enc.l{l}.ffn.b1"), Tensor::zeros(vec![f]))?;
        params.insert(format!("enc.l{l}.ffn.w2"), glorot_uniform(f, e, rng))?;
        params.insert(format!("enc.l{l}.ffn.b2"), Tensor::zeros(vec![e]))?;
    }
    layer_norm(params, "enc.ln_final".to_string())?;
    for l in 0..cfg.num_layers {
        layer_norm(params, format!("dec.l{l}.ln1"))?;
        attn(params, format!("dec.l{l}.self"), rng)?;
        layer_norm(params, format!("dec.l{l}.ln2"))?;
        attn(params, format!("dec.l{l}.cross"), rng)?;
        layer_norm(params, format!("dec.l{l}.ln3"))?;
        params.insert(format!("dec.l{l}.ffn.w1"), glorot_uniform(e, f, rng))?;
        params.insert(format!("dec.l{l}.ffn.b1"), Tensor::zeros(vec![f]))?;
        params.insert(format!("dec.l{l}.ffn.w2"), glorot_uniform(f, e, rng))?;
        params.insert(format!("dec.l{l}.ffn.b2"), Tensor::zeros(vec![e]))?;
    }
    layer_norm(params, "dec.ln_final".to_string())?;
    Ok(())
}

/// Sinusoidal position encoding tiled for a flat `[batch * len, dim]` layout.
fn position_encoding<F: Scalar>(batch: usize, len: usize, dim: usize) -> Tensor<F> {
    let mut one = vec![0.0f64; len * dim];
    for pos in 0..len {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            one[pos * dim + 2 * i] = angle.sin();
            one[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    let mut data = Vec::with_capacity(batch * len * dim);
    for _ in 0..batch {
        data.extend(one.iter().map(|&v| F::from_f64(v)));
    }
    Tensor::from_vec(vec![batch * len, dim], data).expect("shape matches by construction")
}

/// Scaled embeddings plus position encoding, with dropout in training mode.
fn embed<F: Scalar>(
    fwd: &mut Fwd<'_, F>,
    p: &ParamsView<'_, F>,
    table: &str,
    ids: &[u32],
    batch: usize,
    len: usize,
    dim: usize,
) -> Result<Tensor<F>> {
    let x = fwd.tape.embedding(p.get(table), ids)?;
    let x = fwd.tape.scale(&x, (dim as f64).sqrt())?;
    let x = fwd.tape.add(&x, &position_encoding(batch, len, dim))?;
    Ok(fwd.apply_dropout(&x)?)
}

fn layer_norm<F: Scalar>(
    fwd: &mut Fwd<'_, F>,
    p: &ParamsView<'_, F>,
    name: &str,
    x: &Tensor<F>,
) -> Result<Tensor<F>> {
    Ok(fwd
        .tape
        .layer_norm(x, p.get(&format!("{name}.g")), p.get(&format!("{name}.b")))?)
}

/// One attention sublayer: project, attend, project back; residual is added
/// by the caller.
#[allow(clippy::too_many_arguments)]
fn attention_sublayer<F: Scalar>(
    fwd: &mut Fwd<'_, F>,
    p: &ParamsView<'_, F>,
    name: &str,
    queries: &Tensor<F>,
    keys_values: &Tensor<F>,
    batch: usize,
    q_len: usize,
    k_len: usize,
    heads: usize,
    causal: bool,
) -> Result<Tensor<F>> {
    let get = |suffix: &str| p.get(&format!("{name}.{suffix}"));
    let q = fwd.tape.bias_add(&fwd.tape.matmul(queries, get("wq"))?, get("bq"))?;
    let k = fwd.tape.bias_add(&fwd.tape.matmul(keys_values, get("wk"))?, get("bk"))?;
    let v = fwd.tape.bias_add(&fwd.tape.matmul(keys_values, get("wv"))?, get("bv"))?;
    let ctx = fwd
        .tape
        .multi_head_attention(&q, &k, &v, batch, q_len, k_len, heads, causal)?;
    let out = fwd.tape.bias_add(&fwd.tape.matmul(&ctx, get("wo"))?, get("bo"))?;
    Ok(fwd.apply_dropout(&out)?)
}

fn ffn_sublayer<F: Scalar>(
    fwd: &mut Fwd<'_, F>,
    p: &ParamsView<'_, F>,
    prefix: &str,
    x: &Tensor<F>,
) -> Result<Tensor<F>> {
    let get = |suffix: &str| p.get(&format!("{prefix}.{suffix}"));
    let hidden = fwd.tape.relu(&fwd.tape.bias_add(&fwd.tape.matmul(x, get("w1"))?, get("b1"))?)?;
    let out = fwd.tape.bias_add(&fwd.tape.matmul(&hidden, get("w2"))?, get("b2"))?;
    Ok(fwd.apply_dropout(&out)?)
}

/// Encoder stack over a flat `[batch * len, embed]` input.
fn encode_flat<F: Scalar>(
    fwd: &mut Fwd<'_, F>,
    cfg: &ModelConfig,
    p: &ParamsView<'_, F>,
    src: &[u32],
    batch: usize,
    len: usize,
) -> Result<Tensor<F>> {
    let mut x = embed(fwd, p, "src_embed", src, batch, len, cfg.embed_dim)?;
    for l in 0..cfg.num_layers {
        let y = layer_norm(fwd, p, &format!("enc.l{l}.ln1"), &x)?;
        let attn = attention_sublayer(
            fwd,
            p,
            &format!("enc.l{l}.attn"),
            &y,
            &y,
            batch,
            len,
            len,
            cfg.num_heads,
            false,
        )?;
        x = fwd.tape.add(&x, &attn)?;
        let y = layer_norm(fwd, p, &format!("enc.l{l}.ln2"), &x)?;
        let ff = ffn_sublayer(fwd, p, &format!("enc.l{l}.ffn"), &y)?;
        x = fwd.tape.add(&x, &ff)?;
    }
    layer_norm(fwd, p, "enc.ln_final", &x)
}

/// Decoder stack over a flat `[batch * tgt_len, embed]` input given encoder
/// output `[batch * src_len, embed]`; returns final hidden states.
#[allow(clippy::too_many_arguments)]
fn decode_flat<F: Scalar>(
    fwd: &mut Fwd<'_, F>,
    cfg: &ModelConfig,
    p: &ParamsView<'_, F>,
    tgt_in: &[u32],
    enc_out: &Tensor<F>,
    batch: usize,
    tgt_len: usize,
    src_len: usize,
) -> Result<Tensor<F>> {
    let mut x = embed(fwd, p, "tgt_embed", tgt_in, batch, tgt_len, cfg.embed_dim)?;
    for l in 0..cfg.num_layers {
        let y = layer_norm(fwd, p, &format!("dec.l{l}.ln1"), &x)?;
        let self_attn = attention_sublayer(
            fwd,
            p,
            &format!("dec.l{l}.self"),
            &y,
            &y,
            batch,
            tgt_len,
            tgt_len,
            cfg.num_heads,
            true,
        )?;
        x = fwd.tape.add(&x, &self_attn)?;
        let y = layer_norm(fwd, p, &format!("dec.l{l}.ln2"), &x)?;
        let cross = attention_sublayer(
            fwd,
            p,
            &format!("dec.l{l}.cross"),
            &y,
            enc_out,
            batch,
            tgt_len,
            src_len,
            cfg.num_heads,
            false,
        )?;
        x = fwd.tape.add(&x, &cross)?;
        let y = layer_norm(fwd, p, &format!("dec.l{l}.ln3"), &x)?;
        let ff = ffn_sublayer(fwd, p, &format!("dec.l{l}.ffn"), &y)?;
        x = fwd.tape.add(&x, &ff)?;
    }
    layer_norm(fwd, p, "dec.ln_final", &x)
}

fn output_logits<F: Scalar>(
    fwd: &mut Fwd<'_, F>,
    cfg: &ModelConfig,
    p: &ParamsView<'_, F>,
    x: &Tensor<F>,
) -> Result<Tensor<F>> {
    let logits = if cfg.tie_output_embeddings {
        fwd.tape.matmul_nt(x, p.get("tgt_embed"))?
    } else {
        fwd.tape.matmul(x, p.get("out.w"))?
    };
    Ok(fwd.tape.bias_add(&logits, p.get("out.bias"))?)
}

/// Teacher-forced logits, batch-major `[batch * tgt_len, vocab]`.
pub(super) fn teacher_logits<F: Scalar>(
    fwd: &mut Fwd<'_, F>,
    cfg: &ModelConfig,
    p: &ParamsView<'_, F>,
    batch: &Batch,
) -> Result<Tensor<F>> {
    let enc_out = encode_flat(fwd, cfg, p, &batch.src, batch.batch, batch.src_len)?;
    let dec_out = decode_flat(
        fwd,
        cfg,
        p,
        &batch.tgt_in,
        &enc_out,
        batch.batch,
        batch.tgt_len,
        batch.src_len,
    )?;
    output_logits(fwd, cfg, p, &dec_out)
}

/// Encode one source (batch of one); the summary is the mean of the
/// per-position states.
pub(super) fn encode<F: Scalar>(
    fwd: &mut Fwd<'_, F>,
    cfg: &ModelConfig,
    p: &ParamsView<'_, F>,
    src: &[u32],
) -> Result<EncodedSource<F>> {
    let states = encode_flat(fwd, cfg, p, src, 1, src.len())?;
    let len = src.len();
    let ones = Tensor::full(vec![1, len], F::from_f64(1.0 / len as f64));
    let summary = fwd.tape.matmul(&ones, &states)?;
    Ok(EncodedSource::SelfAttention { states, summary })
}

/// Logits for the next symbol after `prefix` (which starts with BOS).
pub(super) fn decode_prefix<F: Scalar>(
    fwd: &mut Fwd<'_, F>,
    cfg: &ModelConfig,
    p: &ParamsView<'_, F>,
    enc_states: &Tensor<F>,
    prefix: &[u32],
) -> Result<Tensor<F>> {
    let t = prefix.len();
    let src_len = enc_states.shape()[0];
    let dec_out = decode_flat(fwd, cfg, p, prefix, enc_states, 1, t, src_len)?;
    let last = fwd.tape.slice_rows(&dec_out, t - 1, 1)?;
    output_logits(fwd, cfg, p, &last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DimProfile, Model, Preset};

    #[test]
    fn position_encoding_rows_alternate_sin_cos() {
        let pe: Tensor<f64> = position_encoding(1, 3, 4);
        // Position 0: sin(0) = 0, cos(0) = 1.
        assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        // Position 1, i = 0: sin(1), cos(1).
        assert!((pe.data()[4] - 1.0f64.sin()).abs() < 1e-12);
        assert!((pe.data()[5] - 1.0f64.cos()).abs() < 1e-12);
    }

    #[test]
    fn position_encoding_tiles_identically_per_example() {
        let pe: Tensor<f64> = position_encoding(3, 5, 8);
        let one = &pe.data()[..5 * 8];
        assert_eq!(&pe.data()[5 * 8..2 * 5 * 8], one);
        assert_eq!(&pe.data()[2 * 5 * 8..], one);
    }

    #[test]
    fn transformer_encodes_and_decodes() {
        let model: Model<f64> =
            Model::new(Preset::Transformer.config(&DimProfile::tiny(), 12), 7).unwrap();
        let enc = model.encode(&[4, 5, 6, 7]).unwrap();
        assert_eq!(enc.len(), 4);
        let st = model.initial_state(&enc).unwrap();
        let (logits, st2) = model.decode_step(&enc, &st, 1).unwrap();
        assert_eq!(logits.shape(), &[1, 12]);
        let (logits2, _) = model.decode_step(&enc, &st2, 4).unwrap();
        assert_eq!(logits2.shape(), &[1, 12]);
        assert!(logits.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn shifting_values_by_constant_shifts_attention_output_by_constant() {
        // If each head's weight rows sum to 1, adding c to every value
        // vector adds exactly c to every output coordinate.
        use crate::tape::Tape;
        let tape = Tape::<f64>::new();
        let rows = 6;
        let dim = 8;
        let data: Vec<f64> = (0..rows * dim).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.0).collect();
        let q = Tensor::from_vec(vec![rows, dim], data.clone()).unwrap();
        let k = q.clone();
        let v = q.clone();
        let out = tape.multi_head_attention(&q, &k, &v, 2, 3, 3, 4, false).unwrap();
        let shifted: Vec<f64> = data.iter().map(|x| x + 2.5).collect();
        let v2 = Tensor::from_vec(vec![rows, dim], shifted).unwrap();
        let out2 = tape.multi_head_attention(&q, &k, &v2, 2, 3, 3, 4, false).unwrap();
        for (a, b) in out.data().iter().zip(out2.data()) {
            assert!((b - a - 2.5).abs() < 1e-9, "{} vs {}", a, b);
        }
    }

    #[test]
    fn single_head_equals_plain_scaled_dot_product() {
        use crate::tape::Tape;
        use crate::tensor::softmax_rows;
        let tape = Tape::<f64>::new();
        let (t_len, dim) = (3, 4);
        let q_data: Vec<f64> = (0..t_len * dim).map(|i| (i as f64 * 0.7).sin()).collect();
        let k_data: Vec<f64> = (0..t_len * dim).map(|i| (i as f64 * 0.3).cos()).collect();
        let v_data: Vec<f64> = (0..t_len * dim).map(|i| i as f64 * 0.1).collect();
        let q = Tensor::from_vec(vec![t_len, dim], q_data.clone()).unwrap();
        let k = Tensor::from_vec(vec![t_len, dim], k_data.clone()).unwrap();
        let v = Tensor::from_vec(vec![t_len, dim], v_data.clone()).unwrap();
        let out = tape.multi_head_attention(&q, &k, &v, 1, t_len, t_len, 1, false).unwrap();

        // Reference: softmax(q k^T / sqrt(d)) v computed with plain loops.
        let scale = 1.0 / (dim as f64).sqrt();
        let mut scores = vec![0.0f64; t_len * t_len];
        for i in 0..t_len {
            for j in 0..t_len {
                let dot: f64 = (0..dim).map(|d| q_data[i * dim + d] * k_data[j * dim + d]).sum();
                scores[i * t_len + j] = dot * scale;
            }
        }
        let mut probs = vec![0.0f64; t_len * t_len];
        softmax_rows(&scores, t_len, None, &mut probs).unwrap();
        for i in 0..t_len {
            for d in 0..dim {
                let expected: f64 =
                    (0..t_len).map(|j| probs[i * t_len + j] * v_data[j * dim + d]).sum();
                assert!((out.data()[i * dim + d] - expected).abs() < 1e-12);
            }
        }
    }
}
