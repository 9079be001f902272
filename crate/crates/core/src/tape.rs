//! Wengert-tape reverse-mode automatic differentiation.
//!
//! Primitive applications are recorded on a [`Tape`] during the forward pass
//! and replayed in reverse by [`Tape::backward`] to produce gradients for
//! every `requires_grad` leaf. Each tape supports exactly one backward pass;
//! a new forward pass needs a new tape.
//!
//! The primitive set is what the encoder-decoder models here need: matrix
//! multiply, elementwise arithmetic, activations, masked softmax, concat and
//! slicing, embedding lookup, layer norm, dropout, fused multi-head
//! attention, and a fused token-level cross-entropy.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::tensor::{gemm_into, softmax_rows, NodeRef, Scalar, ShapeError, Tensor};

#[derive(Debug, Error)]
pub enum AutogradError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tape already consumed by a backward pass; run a new forward pass on a fresh tape")]
    TapeConsumed,
    #[error("tensor belongs to a different tape (expected tape {expected}, found {found})")]
    ForeignTape { expected: u64, found: u64 },
    #[error("softmax mask leaves no admissible entry: {0}")]
    FullyMasked(String),
}

type Result<T> = std::result::Result<T, AutogradError>;

fn shape_err(op: &'static str, msg: impl Into<String>) -> AutogradError {
    AutogradError::Shape(ShapeError::new(op, msg))
}

/// Recorded primitive kind together with whatever the backward pass needs.
enum Op<F: Scalar> {
    Leaf,
    Constant,
    Add,
    BiasAdd,
    Mul,
    Scale(f64),
    AddScalar,
    MatMul {
        trans_a: bool,
        trans_b: bool,
    },
    Tanh,
    Sigmoid,
    Relu,
    Softmax,
    Concat {
        axis: usize,
    },
    SliceLast {
        start: usize,
    },
    SliceRows {
        start: usize,
    },
    Embedding {
        ids: Arc<Vec<u32>>,
    },
    LayerNorm {
        /// (mean, 1/std) per row, saved from the forward pass.
        stats: Arc<Vec<(F, F)>>,
    },
    Dropout {
        /// Inverted-dropout mask: 0 or 1/keep_prob per element.
        mask: Arc<Vec<F>>,
    },
    CrossEntropyMean {
        targets: Arc<Vec<u32>>,
        weights: Arc<Vec<f64>>,
        probs: Arc<Vec<F>>,
        weight_sum: f64,
        smoothing: f64,
    },
    Sum,
    RowScale,
    MultiHeadAttention {
        batch: usize,
        q_len: usize,
        k_len: usize,
        heads: usize,
        probs: Arc<Vec<F>>,
    },
}

struct Node<F: Scalar> {
    op: Op<F>,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    values: Arc<Vec<F>>,
    needs_grad: bool,
}

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Recording tape for one forward/backward cycle.
pub struct Tape<F: Scalar> {
    id: u64,
    nodes: RefCell<Vec<Node<F>>>,
    consumed: Cell<bool>,
}

/// Gradients keyed by the tape node of each `requires_grad` leaf.
pub struct Gradients<F: Scalar> {
    tape: u64,
    by_node: HashMap<usize, Vec<F>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient for a leaf tensor returned by [`Tape::leaf`], if any.
    pub fn for_tensor(&self, t: &Tensor<F>) -> Option<&[F]> {
        let node = t.node?;
        if node.tape != self.tape {
            return None;
        }
        self.by_node.get(&node.id).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Register a tensor as a differentiation leaf on this tape.
    pub fn leaf(&self, t: &Tensor<F>, requires_grad: bool) -> Result<Tensor<F>> {
        if self.consumed.get() {
            return Err(AutogradError::TapeConsumed);
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            shape: t.shape().to_vec(),
            values: t.shared_data(),
            needs_grad: requires_grad,
        });
        Ok(Tensor::from_parts(
            t.shape().to_vec(),
            t.shared_data(),
            Some(NodeRef { tape: self.id, id }),
        ))
    }

    /// Node id of an input tensor, registering untracked inputs as constants.
    /// Returns an error for tensors recorded on another tape.
    fn input_id(&self, nodes: &mut Vec<Node<F>>, t: &Tensor<F>) -> Result<usize> {
        match t.node {
            Some(r) if r.tape == self.id => Ok(r.id),
            Some(r) => Err(AutogradError::ForeignTape { expected: self.id, found: r.tape }),
            None => {
                let id = nodes.len();
                nodes.push(Node {
                    op: Op::Constant,
                    inputs: vec![],
                    shape: t.shape().to_vec(),
                    values: t.shared_data(),
                    needs_grad: false,
                });
                Ok(id)
            }
        }
    }

    fn tracked(&self, t: &Tensor<F>) -> Result<bool> {
        match t.node {
            Some(r) if r.tape == self.id => Ok(self.nodes.borrow()[r.id].needs_grad),
            Some(r) => Err(AutogradError::ForeignTape { expected: self.id, found: r.tape }),
            None => Ok(false),
        }
    }

    /// Finish an op application: record it if any input participates in
    /// differentiation, otherwise return an untracked tensor.
    fn finish(
        &self,
        op: Op<F>,
        inputs: &[&Tensor<F>],
        shape: Vec<usize>,
        values: Vec<F>,
    ) -> Result<Tensor<F>> {
        let mut any_live = false;
        for t in inputs {
            any_live |= self.tracked(t)?;
        }
        let values = Arc::new(values);
        if !any_live {
            return Ok(Tensor::from_parts(shape, values, None));
        }
        if self.consumed.get() {
            return Err(AutogradError::TapeConsumed);
        }
        let mut nodes = self.nodes.borrow_mut();
        let input_ids = inputs
            .iter()
            .map(|t| self.input_id(&mut nodes, t))
            .collect::<Result<Vec<_>>>()?;
        let id = nodes.len();
        nodes.push(Node {
            op,
            inputs: input_ids,
            shape: shape.clone(),
            values: Arc::clone(&values),
            needs_grad: true,
        });
        Ok(Tensor::from_parts(shape, values, Some(NodeRef { tape: self.id, id })))
    }

    // ---- elementwise ----

    pub fn add(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        if a.shape() != b.shape() {
            return Err(shape_err(
                "add",
                format!("operand shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let values = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        self.finish(Op::Add, &[a, b], a.shape().to_vec(), values)
    }

    /// `x + bias` where `bias` is broadcast over every row of `x`
    /// (`x: [..., h]`, `bias: [h]`).
    pub fn bias_add(&self, x: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
        let h = x.last_dim();
        if bias.shape() != [h] {
            return Err(shape_err(
                "bias_add",
                format!("bias shape {:?} does not match last axis {} of {:?}", bias.shape(), h, x.shape()),
            ));
        }
        let b = bias.data();
        let values = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % h])
            .collect();
        self.finish(Op::BiasAdd, &[x, bias], x.shape().to_vec(), values)
    }

    pub fn mul(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        if a.shape() != b.shape() {
            return Err(shape_err(
                "mul",
                format!("operand shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let values = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        self.finish(Op::Mul, &[a, b], a.shape().to_vec(), values)
    }

    pub fn scale(&self, x: &Tensor<F>, c: f64) -> Result<Tensor<F>> {
        let cf = F::from_f64(c);
        let values = x.data().iter().map(|&v| v * cf).collect();
        self.finish(Op::Scale(c), &[x], x.shape().to_vec(), values)
    }

    pub fn add_scalar(&self, x: &Tensor<F>, c: f64) -> Result<Tensor<F>> {
        let cf = F::from_f64(c);
        let values = x.data().iter().map(|&v| v + cf).collect();
        self.finish(Op::AddScalar, &[x], x.shape().to_vec(), values)
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let neg = self.scale(x, -1.0)?;
        self.add_scalar(&neg, 1.0)
    }

    // ---- matrix multiply ----

    fn matmul_impl(&self, a: &Tensor<F>, b: &Tensor<F>, trans_b: bool) -> Result<Tensor<F>> {
        let (ar, ac) = a.dims2().map_err(AutogradError::Shape)?;
        let (br, bc) = b.dims2().map_err(AutogradError::Shape)?;
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if ac != k2 {
            return Err(shape_err(
                "matmul",
                format!(
                    "inner dimensions disagree: [{} x {}] @ {}[{} x {}]",
                    ar,
                    ac,
                    if trans_b { "transposed " } else { "" },
                    br,
                    bc
                ),
            ));
        }
        let mut values = vec![F::ZERO; ar * n];
        gemm_into(false, trans_b, 1.0, a.data(), (ar, ac), b.data(), (br, bc), 0.0, &mut values);
        self.finish(
            Op::MatMul { trans_a: false, trans_b },
            &[a, b],
            vec![ar, n],
            values,
        )
    }

    /// `a @ b` for rank-2 tensors.
    pub fn matmul(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` for rank-2 tensors, without materializing the transpose.
    pub fn matmul_nt(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        self.matmul_impl(a, b, true)
    }

    // ---- activations ----

    pub fn tanh(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let values = x.data().iter().map(|&v| v.tanh()).collect();
        self.finish(Op::Tanh, &[x], x.shape().to_vec(), values)
    }

    pub fn sigmoid(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let one = F::ONE;
        let values = x.data().iter().map(|&v| one / (one + (-v).exp())).collect();
        self.finish(Op::Sigmoid, &[x], x.shape().to_vec(), values)
    }

    pub fn relu(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let values = x.data().iter().map(|&v| v.maximum(F::ZERO)).collect();
        self.finish(Op::Relu, &[x], x.shape().to_vec(), values)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.softmax_with_mask(x, None)
    }

    /// Softmax over the last axis where entries with mask `false` are
    /// excluded from normalization and get probability exactly zero.
    pub fn softmax_masked(&self, x: &Tensor<F>, mask: Vec<bool>) -> Result<Tensor<F>> {
        if mask.len() != x.numel() {
            return Err(shape_err(
                "softmax",
                format!("mask has {} entries for tensor of {} elements", mask.len(), x.numel()),
            ));
        }
        self.softmax_with_mask(x, Some(Arc::new(mask)))
    }

    fn softmax_with_mask(&self, x: &Tensor<F>, mask: Option<Arc<Vec<bool>>>) -> Result<Tensor<F>> {
        let cols = x.last_dim();
        let mut values = vec![F::ZERO; x.numel()];
        softmax_rows(x.data(), cols, mask.as_ref().map(|m| m.as_slice()), &mut values)
            .map_err(AutogradError::FullyMasked)?;
        self.finish(Op::Softmax, &[x], x.shape().to_vec(), values)
    }

    // ---- shape ops ----

    /// Concatenate along `axis`. All other dimensions must agree.
    pub fn concat(&self, parts: &[&Tensor<F>], axis: usize) -> Result<Tensor<F>> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs"));
        }
        let rank = parts[0].shape().len();
        if axis >= rank {
            return Err(shape_err("concat", format!("axis {} out of range for rank {}", axis, rank)));
        }
        for p in parts {
            if p.shape().len() != rank {
                return Err(shape_err("concat", "inputs have differing rank"));
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != parts[0].shape()[d] {
                    return Err(shape_err(
                        "concat",
                        format!(
                            "dimension {} differs: {:?} vs {:?}",
                            d,
                            p.shape(),
                            parts[0].shape()
                        ),
                    ));
                }
            }
        }
        let mut shape = parts[0].shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut values = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let e = p.shape()[axis];
                let block = e * inner;
                values.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
            }
        }
        self.finish(Op::Concat { axis }, parts, shape, values)
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&self, x: &Tensor<F>, start: usize, len: usize) -> Result<Tensor<F>> {
        let d = x.last_dim();
        if len == 0 || start + len > d {
            return Err(shape_err(
                "slice_last",
                format!("slice {}..{} out of range for last axis {}", start, start + len, d),
            ));
        }
        let rows = x.rows_for_last_axis();
        let mut values = Vec::with_capacity(rows * len);
        for r in 0..rows {
            values.extend_from_slice(&x.data()[r * d + start..r * d + start + len]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.finish(Op::SliceLast { start }, &[x], shape, values)
    }

    /// Rows `start..start+len` of the first axis.
    pub fn slice_rows(&self, x: &Tensor<F>, start: usize, len: usize) -> Result<Tensor<F>> {
        let d0 = x.shape()[0];
        if len == 0 || start + len > d0 {
            return Err(shape_err(
                "slice_rows",
                format!("slice {}..{} out of range for first axis {}", start, start + len, d0),
            ));
        }
        let inner: usize = x.shape()[1..].iter().product();
        let values = x.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = x.shape().to_vec();
        shape[0] = len;
        self.finish(Op::SliceRows { start }, &[x], shape, values)
    }

    // ---- lookup / normalization / regularization ----

    /// Gather rows of `table` (`[vocab, dim]`) by id.
    pub fn embedding(&self, table: &Tensor<F>, ids: &[u32]) -> Result<Tensor<F>> {
        let (v, e) = table.dims2().map_err(AutogradError::Shape)?;
        if ids.is_empty() {
            return Err(shape_err("embedding", "empty id sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= v) {
            return Err(shape_err(
                "embedding",
                format!("id {} out of range for vocabulary of size {}", bad, v),
            ));
        }
        let mut values = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            let r = id as usize;
            values.extend_from_slice(&table.data()[r * e..(r + 1) * e]);
        }
        self.finish(
            Op::Embedding { ids: Arc::new(ids.to_vec()) },
            &[table],
            vec![ids.len(), e],
            values,
        )
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&self, x: &Tensor<F>, gain: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
        const EPS: f64 = 1e-5;
        let h = x.last_dim();
        if gain.shape() != [h] || bias.shape() != [h] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} do not match last axis {} of {:?}",
                    gain.shape(),
                    bias.shape(),
                    h,
                    x.shape()
                ),
            ));
        }
        let rows = x.rows_for_last_axis();
        let mut values = vec![F::ZERO; x.numel()];
        let mut stats = Vec::with_capacity(rows);
        let hf = F::from_f64(h as f64);
        let eps = F::from_f64(EPS);
        for r in 0..rows {
            let row = &x.data()[r * h..(r + 1) * h];
            let mean = row.iter().copied().sum::<F>() / hf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / hf;
            let rstd = F::ONE / (var + eps).sqrt();
            stats.push((mean, rstd));
            for j in 0..h {
                values[r * h + j] = (row[j] - mean) * rstd * gain.data()[j] + bias.data()[j];
            }
        }
        self.finish(
            Op::LayerNorm { stats: Arc::new(stats) },
            &[x, gain, bias],
            x.shape().to_vec(),
            values,
        )
    }

    /// Inverted dropout: elements are zeroed with probability `rate` and the
    /// survivors scaled by `1/(1-rate)`, so inference needs no rescaling.
    /// `rate <= 0` is the identity.
    pub fn dropout<R: Rng + ?Sized>(&self, x: &Tensor<F>, rate: f64, rng: &mut R) -> Result<Tensor<F>> {
        if rate <= 0.0 {
            return Ok(x.clone());
        }
        if rate >= 1.0 {
            return Err(shape_err("dropout", format!("rate {} must be < 1", rate)));
        }
        let keep_scale = F::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..x.numel())
            .map(|_| if rng.gen::<f64>() < rate { F::ZERO } else { keep_scale })
            .collect();
        let values = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        self.finish(Op::Dropout { mask: Arc::new(mask) }, &[x], x.shape().to_vec(), values)
    }

    /// Weighted mean token-level cross-entropy from raw logits.
    ///
    /// `loss = sum_i w_i * nll(logits_i, target_i) / sum_i w_i`, with the
    /// log-sum-exp evaluated in f64. Weight zero drops a position (padding).
    /// With `smoothing` > 0, targets become
    /// `(1 - smoothing) * onehot + smoothing / vocab`.
    pub fn cross_entropy_mean(
        &self,
        logits: &Tensor<F>,
        targets: &[u32],
        weights: &[f64],
        smoothing: f64,
    ) -> Result<Tensor<F>> {
        let (n, v) = logits.dims2().map_err(AutogradError::Shape)?;
        if targets.len() != n || weights.len() != n {
            return Err(shape_err(
                "cross_entropy",
                format!("{} logit rows vs {} targets / {} weights", n, targets.len(), weights.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= v) {
            return Err(shape_err(
                "cross_entropy",
                format!("target id {} out of range for {} classes", bad, v),
            ));
        }
        let weight_sum: f64 = weights.iter().sum();
        if weight_sum <= 0.0 {
            return Err(shape_err("cross_entropy", "total weight must be positive"));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(shape_err("cross_entropy", format!("smoothing {} outside [0, 1)", smoothing)));
        }
        let mut probs = vec![F::ZERO; n * v];
        softmax_rows(logits.data(), v, None, &mut probs).map_err(AutogradError::FullyMasked)?;
        let uniform = smoothing / v as f64;
        let mut loss = 0.0f64;
        for i in 0..n {
            if weights[i] == 0.0 {
                continue;
            }
            let row: Vec<f64> = logits.data()[i * v..(i + 1) * v].iter().map(|x| x.to_f64()).collect();
            let lp = crate::tensor::log_softmax_row_f64(&row);
            let mut nll = -(1.0 - smoothing) * lp[targets[i] as usize];
            if smoothing > 0.0 {
                nll -= uniform * lp.iter().sum::<f64>();
            }
            loss += weights[i] * nll;
        }
        loss /= weight_sum;
        self.finish(
            Op::CrossEntropyMean {
                targets: Arc::new(targets.to_vec()),
                weights: Arc::new(weights.to_vec()),
                probs: Arc::new(probs),
                weight_sum,
                smoothing,
            },
            &[logits],
            vec![1],
            vec![F::from_f64(loss)],
        )
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let total = x.data().iter().copied().sum::<F>();
        self.finish(Op::Sum, &[x], vec![1], vec![total])
    }

    /// Scale row `i` of `x` by `weights[i]`. `weights` must have exactly one
    /// element per row of `x` (shape `[n]` or `[n, 1]`).
    pub fn row_scale(&self, weights: &Tensor<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        let n = x.shape()[0];
        if weights.numel() != n {
            return Err(shape_err(
                "row_scale",
                format!("{} weights for {} rows", weights.numel(), n),
            ));
        }
        let inner: usize = x.shape()[1..].iter().product();
        let mut values = Vec::with_capacity(x.numel());
        for (i, &w) in weights.data().iter().enumerate() {
            values.extend(x.data()[i * inner..(i + 1) * inner].iter().map(|&v| v * w));
        }
        self.finish(Op::RowScale, &[weights, x], x.shape().to_vec(), values)
    }

    /// Fused multi-head scaled dot-product attention.
    ///
    /// `q: [batch*q_len, dim]`, `k, v: [batch*k_len, dim]`, row-major with
    /// example-major rows. Heads split the feature axis. With `causal`,
    /// query position `i` attends only to key positions `<= i`
    /// (requires `q_len == k_len`). Returns `[batch*q_len, dim]`.
    #[allow(clippy::too_many_arguments)]
    pub fn multi_head_attention(
        &self,
        q: &Tensor<F>,
        k: &Tensor<F>,
        v: &Tensor<F>,
        batch: usize,
        q_len: usize,
        k_len: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Tensor<F>> {
        let (qr, dim) = q.dims2().map_err(AutogradError::Shape)?;
        let (kr, kd) = k.dims2().map_err(AutogradError::Shape)?;
        let (vr, vd) = v.dims2().map_err(AutogradError::Shape)?;
        if kd != dim || vd != dim {
            return Err(shape_err(
                "multi_head_attention",
                format!("feature dims differ: q {}, k {}, v {}", dim, kd, vd),
            ));
        }
        if qr != batch * q_len || kr != batch * k_len || vr != batch * k_len {
            return Err(shape_err(
                "multi_head_attention",
                format!(
                    "rows {}/{}/{} do not match batch {} with lengths {}/{}",
                    qr, kr, vr, batch, q_len, k_len
                ),
            ));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(shape_err(
                "multi_head_attention",
                format!("feature dim {} not divisible by {} heads", dim, heads),
            ));
        }
        if causal && q_len != k_len {
            return Err(shape_err(
                "multi_head_attention",
                format!("causal attention needs q_len == k_len, got {} vs {}", q_len, k_len),
            ));
        }
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![F::ZERO; batch * heads * q_len * k_len];
        let mut out = vec![F::ZERO; batch * q_len * dim];
        mha_forward(
            q.data(),
            k.data(),
            v.data(),
            batch,
            q_len,
            k_len,
            heads,
            dh,
            scale,
            causal,
            &mut probs,
            &mut out,
        );
        self.finish(
            Op::MultiHeadAttention {
                batch,
                q_len,
                k_len,
                heads,
                probs: Arc::new(probs),
            },
            &[q, k, v],
            vec![batch * q_len, dim],
            out,
        )
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// `requires_grad` leaf reachable from the loss; a constant loss yields
    /// an empty gradient map.
    pub fn backward(&self, loss: &Tensor<F>) -> Result<Gradients<F>> {
        if self.consumed.get() {
            return Err(AutogradError::TapeConsumed);
        }
        if !loss.is_scalar() {
            return Err(AutogradError::NonScalarLoss { shape: loss.shape().to_vec() });
        }
        let root = match loss.node {
            None => {
                // Loss does not depend on anything recorded.
                return Ok(Gradients { tape: self.id, by_node: HashMap::new() });
            }
            Some(r) if r.tape != self.id => {
                return Err(AutogradError::ForeignTape { expected: self.id, found: r.tape })
            }
            Some(r) => r.id,
        };
        self.consumed.set(true);

        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<F>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![F::ONE]);
        let mut result = HashMap::new();

        for id in (0..=root).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            match node.op {
                Op::Leaf => {
                    if node.needs_grad {
                        result.insert(id, g);
                    }
                    continue;
                }
                Op::Constant => continue,
                _ => {}
            }
            let input_grads = vjp(node, &nodes, &g);
            for (slot, ig) in node.inputs.iter().zip(input_grads) {
                let ig = match ig {
                    Some(ig) => ig,
                    None => continue,
                };
                if !nodes[*slot].needs_grad {
                    continue;
                }
                match &mut grads[*slot] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&ig) {
                            *a += *b;
                        }
                    }
                    None => grads[*slot] = Some(ig),
                }
            }
        }
        Ok(Gradients { tape: self.id, by_node: result })
    }
}

/// Vector-Jacobian product of one node: upstream gradient `g` (shaped like
/// the node output) mapped back to gradients for each input, in order.
/// `None` marks inputs that receive no gradient from this op.
fn vjp<F: Scalar>(node: &Node<F>, nodes: &[Node<F>], g: &[F]) -> Vec<Option<Vec<F>>> {
    let input = |i: usize| -> &Node<F> { &nodes[node.inputs[i]] };
    match &node.op {
        Op::Leaf | Op::Constant => vec![],
        Op::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
        Op::BiasAdd => {
            let h = *node.shape.last().unwrap();
            let mut db = vec![F::ZERO; h];
            for (i, &gv) in g.iter().enumerate() {
                db[i % h] += gv;
            }
            vec![Some(g.to_vec()), Some(db)]
        }
        Op::Mul => {
            let a = &input(0).values;
            let b = &input(1).values;
            let da = g.iter().zip(b.iter()).map(|(&gv, &bv)| gv * bv).collect();
            let db = g.iter().zip(a.iter()).map(|(&gv, &av)| gv * av).collect();
            vec![Some(da), Some(db)]
        }
        Op::Scale(c) => {
            let cf = F::from_f64(*c);
            vec![Some(g.iter().map(|&gv| gv * cf).collect())]
        }
        Op::AddScalar => vec![Some(g.to_vec())],
        Op::MatMul { trans_a, trans_b } => {
            let a = input(0);
            let b = input(1);
            let a_shape = (a.shape[0], a.shape[1]);
            let b_shape = (b.shape[0], b.shape[1]);
            let (m, n) = (node.shape[0], node.shape[1]);
            let mut da = vec![F::ZERO; a.values.len()];
            let mut db = vec![F::ZERO; b.values.len()];
            match (trans_a, trans_b) {
                (false, false) => {
                    // C = A @ B: dA = g @ B^T, dB = A^T @ g
                    gemm_into(false, true, 1.0, g, (m, n), &b.values, b_shape, 0.0, &mut da);
                    gemm_into(true, false, 1.0, &a.values, a_shape, g, (m, n), 0.0, &mut db);
                }
                (false, true) => {
                    // C = A @ B^T: dA = g @ B, dB = g^T @ A
                    gemm_into(false, false, 1.0, g, (m, n), &b.values, b_shape, 0.0, &mut da);
                    gemm_into(true, false, 1.0, g, (m, n), &a.values, a_shape, 0.0, &mut db);
                }
                (true, false) => {
                    // C = A^T @ B: dA = B @ g^T, dB = A @ g
                    gemm_into(false, true, 1.0, &b.values, b_shape, g, (m, n), 0.0, &mut da);
                    gemm_into(false, false, 1.0, &a.values, a_shape, g, (m, n), 0.0, &mut db);
                }
                (true, true) => unreachable!("double-transposed matmul is never recorded"),
            }
            vec![Some(da), Some(db)]
        }
        Op::Tanh => {
            let y = &node.values;
            vec![Some(
                g.iter().zip(y.iter()).map(|(&gv, &yv)| gv * (F::ONE - yv * yv)).collect(),
            )]
        }
        Op::Sigmoid => {
            let y = &node.values;
            vec![Some(
                g.iter().zip(y.iter()).map(|(&gv, &yv)| gv * yv * (F::ONE - yv)).collect(),
            )]
        }
        Op::Relu => {
            let y = &node.values;
            vec![Some(
                g.iter()
                    .zip(y.iter())
                    .map(|(&gv, &yv)| if yv > F::ZERO { gv } else { F::ZERO })
                    .collect(),
            )]
        }
        Op::Softmax => {
            // Masked entries have p = 0, so their slots come out zero.
            let p = &node.values;
            let cols = *node.shape.last().unwrap();
            let mut dx = vec![F::ZERO; p.len()];
            for r in 0..p.len() / cols {
                let pr = &p[r * cols..(r + 1) * cols];
                let gr = &g[r * cols..(r + 1) * cols];
                let dot: F = pr.iter().zip(gr).map(|(&pv, &gv)| pv * gv).sum();
                for j in 0..cols {
                    dx[r * cols + j] = pr[j] * (gr[j] - dot);
                }
            }
            vec![Some(dx)]
        }
        Op::Concat { axis } => {
            let axis = *axis;
            let outer: usize = node.shape[..axis].iter().product();
            let inner: usize = node.shape[axis + 1..].iter().product();
            let total_block = node.shape[axis] * inner;
            let mut out = Vec::with_capacity(node.inputs.len());
            let mut offset = 0;
            for &inp in &node.inputs {
                let e = nodes[inp].shape[axis];
                let block = e * inner;
                let mut di = Vec::with_capacity(outer * block);
                for o in 0..outer {
                    let base = o * total_block + offset;
                    di.extend_from_slice(&g[base..base + block]);
                }
                offset += block;
                out.push(Some(di));
            }
            out
        }
        Op::SliceLast { start } => {
            let x = input(0);
            let d = *x.shape.last().unwrap();
            let len = *node.shape.last().unwrap();
            let mut dx = vec![F::ZERO; x.values.len()];
            for r in 0..x.values.len() / d {
                dx[r * d + start..r * d + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
            }
            vec![Some(dx)]
        }
        Op::SliceRows { start } => {
            let x = input(0);
            let inner: usize = x.shape[1..].iter().product();
            let mut dx = vec![F::ZERO; x.values.len()];
            dx[start * inner..start * inner + g.len()].copy_from_slice(g);
            vec![Some(dx)]
        }
        Op::Embedding { ids } => {
            let table = input(0);
            let e = table.shape[1];
            let mut dt = vec![F::ZERO; table.values.len()];
            for (row, &id) in ids.iter().enumerate() {
                let dst = &mut dt[id as usize * e..(id as usize + 1) * e];
                for (d, &gv) in dst.iter_mut().zip(&g[row * e..(row + 1) * e]) {
                    *d += gv;
                }
            }
            vec![Some(dt)]
        }
        Op::LayerNorm { stats } => {
            let x = input(0);
            let gain = input(1);
            let h = *node.shape.last().unwrap();
            let rows = x.values.len() / h;
            let hf = F::from_f64(h as f64);
            let mut dx = vec![F::ZERO; x.values.len()];
            let mut dgain = vec![F::ZERO; h];
            let mut dbias = vec![F::ZERO; h];
            for r in 0..rows {
                let (mean, rstd) = stats[r];
                let xr = &x.values[r * h..(r + 1) * h];
                let gr = &g[r * h..(r + 1) * h];
                let mut mean_h = F::ZERO;
                let mut mean_hx = F::ZERO;
                for j in 0..h {
                    let xhat = (xr[j] - mean) * rstd;
                    let hj = gr[j] * gain.values[j];
                    mean_h += hj;
                    mean_hx += hj * xhat;
                    dgain[j] += gr[j] * xhat;
                    dbias[j] += gr[j];
                }
                mean_h = mean_h / hf;
                mean_hx = mean_hx / hf;
                for j in 0..h {
                    let xhat = (xr[j] - mean) * rstd;
                    let hj = gr[j] * gain.values[j];
                    dx[r * h + j] = rstd * (hj - mean_h - xhat * mean_hx);
                }
            }
            vec![Some(dx), Some(dgain), Some(dbias)]
        }
        Op::Dropout { mask } => {
            vec![Some(g.iter().zip(mask.iter()).map(|(&gv, &m)| gv * m).collect())]
        }
        Op::CrossEntropyMean { targets, weights, probs, weight_sum, smoothing } => {
            let v = input(0).shape[1];
            let gscalar = g[0];
            let inv = F::from_f64(1.0 / *weight_sum);
            let uniform = F::from_f64(smoothing / v as f64);
            let peak = F::from_f64(1.0 - smoothing);
            let mut dl = vec![F::ZERO; probs.len()];
            for (i, (&t, &w)) in targets.iter().zip(weights.iter()).enumerate() {
                if w == 0.0 {
                    continue;
                }
                let wf = F::from_f64(w);
                for j in 0..v {
                    let q = if j == t as usize { peak + uniform } else { uniform };
                    dl[i * v + j] = gscalar * wf * (probs[i * v + j] - q) * inv;
                }
            }
            vec![Some(dl)]
        }
        Op::Sum => {
            let x = input(0);
            vec![Some(vec![g[0]; x.values.len()])]
        }
        Op::RowScale => {
            let w = input(0);
            let x = input(1);
            let inner: usize = x.shape[1..].iter().product();
            let mut dw = vec![F::ZERO; w.values.len()];
            let mut dx = vec![F::ZERO; x.values.len()];
            for i in 0..x.shape[0] {
                let gr = &g[i * inner..(i + 1) * inner];
                let xr = &x.values[i * inner..(i + 1) * inner];
                dw[i] = gr.iter().zip(xr).map(|(&gv, &xv)| gv * xv).sum();
                for j in 0..inner {
                    dx[i * inner + j] = gr[j] * w.values[i];
                }
            }
            vec![Some(dw), Some(dx)]
        }
        Op::MultiHeadAttention { batch, q_len, k_len, heads, probs, .. } => {
            let q = input(0);
            let k = input(1);
            let v = input(2);
            let dim = q.shape[1];
            let dh = dim / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut dq = vec![F::ZERO; q.values.len()];
            let mut dk = vec![F::ZERO; k.values.len()];
            let mut dv = vec![F::ZERO; v.values.len()];
            mha_backward(
                &q.values, &k.values, &v.values, probs, g, *batch, *q_len, *k_len, *heads, dh,
                scale, &mut dq, &mut dk, &mut dv,
            );
            vec![Some(dq), Some(dk), Some(dv)]
        }
    }
}

/// Strided gemm on column/row sub-blocks of the flat attention buffers.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_raw<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: *const F,
    rsa: isize,
    csa: isize,
    b: *const F,
    rsb: isize,
    csb: isize,
    beta: f64,
    c: *mut F,
    rsc: isize,
    csc: isize,
) {
    F::gemm(m, k, n, F::from_f64(alpha), a, rsa, csa, b, rsb, csb, F::from_f64(beta), c, rsc, csc)
}

#[allow(clippy::too_many_arguments)]
fn mha_forward<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    batch: usize,
    q_len: usize,
    k_len: usize,
    heads: usize,
    dh: usize,
    scale: f64,
    causal: bool,
    probs: &mut [F],
    out: &mut [F],
) {
    let dim = heads * dh;
    let mut scores = vec![F::ZERO; q_len * k_len];
    let causal_mask: Option<Vec<bool>> = causal.then(|| {
        let mut m = vec![false; q_len * k_len];
        for i in 0..q_len {
            for j in 0..=i {
                m[i * k_len + j] = true;
            }
        }
        m
    });
    for b in 0..batch {
        for h in 0..heads {
            let q_off = b * q_len * dim + h * dh;
            let k_off = b * k_len * dim + h * dh;
            let p_off = (b * heads + h) * q_len * k_len;
            unsafe {
                // scores = scale * q_sub @ k_sub^T
                gemm_raw(
                    q_len,
                    dh,
                    k_len,
                    scale,
                    q.as_ptr().add(q_off),
                    dim as isize,
                    1,
                    k.as_ptr().add(k_off),
                    1,
                    dim as isize,
                    0.0,
                    scores.as_mut_ptr(),
                    k_len as isize,
                    1,
                );
            }
            let p_slice = &mut probs[p_off..p_off + q_len * k_len];
            softmax_rows(&scores, k_len, causal_mask.as_deref(), p_slice)
                .expect("causal mask always admits the diagonal");
            unsafe {
                // out_sub = probs @ v_sub
                gemm_raw(
                    q_len,
                    k_len,
                    dh,
                    1.0,
                    p_slice.as_ptr(),
                    k_len as isize,
                    1,
                    v.as_ptr().add(k_off),
                    dim as isize,
                    1,
                    0.0,
                    out.as_mut_ptr().add(q_off),
                    dim as isize,
                    1,
                );
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn mha_backward<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    g: &[F],
    batch: usize,
    q_len: usize,
    k_len: usize,
    heads: usize,
    dh: usize,
    scale: f64,
    dq: &mut [F],
    dk: &mut [F],
    dv: &mut [F],
) {
    let dim = heads * dh;
    let mut dprobs = vec![F::ZERO; q_len * k_len];
    let mut dscores = vec![F::ZERO; q_len * k_len];
    for b in 0..batch {
        for h in 0..heads {
            let q_off = b * q_len * dim + h * dh;
            let k_off = b * k_len * dim + h * dh;
            let p = &probs[(b * heads + h) * q_len * k_len..(b * heads + h + 1) * q_len * k_len];
            unsafe {
                // dv_sub += probs^T @ g_sub
                gemm_raw(
                    k_len,
                    q_len,
                    dh,
                    1.0,
                    p.as_ptr(),
                    1,
                    k_len as isize,
                    g.as_ptr().add(q_off),
                    dim as isize,
                    1,
                    1.0,
                    dv.as_mut_ptr().add(k_off),
                    dim as isize,
                    1,
                );
                // dprobs = g_sub @ v_sub^T
                gemm_raw(
                    q_len,
                    dh,
                    k_len,
                    1.0,
                    g.as_ptr().add(q_off),
                    dim as isize,
                    1,
                    v.as_ptr().add(k_off),
                    1,
                    dim as isize,
                    0.0,
                    dprobs.as_mut_ptr(),
                    k_len as isize,
                    1,
                );
            }
            // Softmax VJP per row; masked entries have p = 0 and stay zero.
            for i in 0..q_len {
                let pr = &p[i * k_len..(i + 1) * k_len];
                let dpr = &dprobs[i * k_len..(i + 1) * k_len];
                let dot: F = pr.iter().zip(dpr).map(|(&pv, &dv_)| pv * dv_).sum();
                for j in 0..k_len {
                    dscores[i * k_len + j] = pr[j] * (dpr[j] - dot);
                }
            }
            unsafe {
                // dq_sub += scale * dscores @ k_sub
                gemm_raw(
                    q_len,
                    k_len,
                    dh,
                    scale,
                    dscores.as_ptr(),
                    k_len as isize,
                    1,
                    k.as_ptr().add(k_off),
                    dim as isize,
                    1,
                    1.0,
                    dq.as_mut_ptr().add(q_off),
                    dim as isize,
                    1,
                );
                // dk_sub += scale * dscores^T @ q_sub
                gemm_raw(
                    k_len,
                    q_len,
                    dh,
                    scale,
                    dscores.as_ptr(),
                    1,
                    k_len as isize,
                    q.as_ptr().add(q_off),
                    dim as isize,
                    1,
                    1.0,
                    dk.as_mut_ptr().add(k_off),
                    dim as isize,
                    1,
                );
            }
        }
    }
}
