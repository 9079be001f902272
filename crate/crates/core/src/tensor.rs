//! Dense row-major tensors over `f32`/`f64`, plus the raw numeric kernels
//! shared by forward and backward passes.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Element type tag, carried by checkpoints so files are self-describing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

/// Floating-point element of a [`Tensor`].
///
/// `f32` is the training default; `f64` exists for gradient checking, where
/// central finite differences need the extra headroom.
pub trait Scalar:
    Copy
    + PartialOrd
    + PartialEq
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::MulAssign
    + std::iter::Sum
{
    const ZERO: Self;
    const ONE: Self;
    const DTYPE: Dtype;
    const BYTE_WIDTH: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    fn push_le_bytes(self, out: &mut Vec<u8>);
    fn from_le_slice(bytes: &[u8]) -> Self;

    /// `C := alpha * op(A) @ op(B) + beta * C` on raw strided buffers.
    ///
    /// # Safety
    /// Pointers must be valid for the given dims/strides; see `matrixmultiply`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: Dtype = Dtype::F32;
    const BYTE_WIDTH: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn push_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE: Dtype = Dtype::F64;
    const BYTE_WIDTH: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn push_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[derive(Debug, Error)]
pub enum ShapeError {
    #[error("{op}: {msg}")]
    Mismatch { op: &'static str, msg: String },
}

impl ShapeError {
    pub(crate) fn new(op: &'static str, msg: impl Into<String>) -> Self {
        ShapeError::Mismatch { op, msg: msg.into() }
    }
}

/// Reference into a recording tape: which tape (by unique id) and which node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub tape: u64,
    pub id: usize,
}

/// Dense n-dimensional array in row-major order.
///
/// Cloning is cheap (shared storage). A tensor may carry a reference to the
/// tape node that produced it; tensors without one are constants as far as
/// differentiation is concerned.
#[derive(Clone)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
    pub(crate) node: Option<NodeRef>,
}

impl<F: Scalar> Tensor<F> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Result<Self, ShapeError> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(ShapeError::new(
                "from_vec",
                format!("dimensions must be positive, got {:?}", shape),
            ));
        }
        if numel != data.len() {
            return Err(ShapeError::new(
                "from_vec",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data: Arc::new(data), node: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![F::ZERO; numel]), node: None }
    }

    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![value; numel]), node: None }
    }

    pub fn scalar(value: F) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![value]), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> F {
        debug_assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Rows/cols of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize), ShapeError> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(ShapeError::new("dims2", format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    /// Same storage, no tape reference.
    pub fn detached(&self) -> Self {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: None }
    }

    /// Mutable access to the underlying values (copy-on-write if shared).
    pub fn data_mut(&mut self) -> &mut [F] {
        Arc::<Vec<F>>::make_mut(&mut self.data)
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<F>> {
        Arc::clone(&self.data)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<F>>, node: Option<NodeRef>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data, node }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Number of rows when the tensor is viewed as `[numel / last_dim, last_dim]`.
    pub fn rows_for_last_axis(&self) -> usize {
        self.numel() / self.last_dim()
    }
}

impl<F: Scalar> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

/// `C := alpha * op(A) @ op(B) + beta * C` where inputs are contiguous
/// row-major buffers described by their physical shapes, with optional
/// transposition.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into<F: Scalar>(
    trans_a: bool,
    trans_b: bool,
    alpha: f64,
    a: &[F],
    a_shape: (usize, usize),
    b: &[F],
    b_shape: (usize, usize),
    beta: f64,
    c: &mut [F],
) {
    let (m, k) = if trans_a { (a_shape.1, a_shape.0) } else { a_shape };
    let (k2, n) = if trans_b { (b_shape.1, b_shape.0) } else { b_shape };
    assert_eq!(k, k2, "gemm: inner dimensions disagree ({} vs {})", k, k2);
    assert_eq!(a.len(), a_shape.0 * a_shape.1);
    assert_eq!(b.len(), b_shape.0 * b_shape.1);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, a_shape.1 as isize) } else { (a_shape.1 as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b_shape.1 as isize) } else { (b_shape.1 as isize, 1) };
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::from_f64(alpha),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            F::from_f64(beta),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-wise numerically stable softmax over the last axis. Masked-out
/// entries (mask `false`) get probability exactly zero.
///
/// Returns an error message if any row has no unmasked entry.
pub(crate) fn softmax_rows<F: Scalar>(
    x: &[F],
    cols: usize,
    mask: Option<&[bool]>,
    out: &mut [F],
) -> Result<(), String> {
    debug_assert_eq!(x.len() % cols, 0);
    debug_assert_eq!(x.len(), out.len());
    if let Some(m) = mask {
        debug_assert_eq!(m.len(), x.len());
    }
    let rows = x.len() / cols;
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let row_mask = mask.map(|m| &m[r * cols..(r + 1) * cols]);
        let mut max: Option<F> = None;
        for (j, &v) in row.iter().enumerate() {
            if row_mask.is_none_or(|m| m[j]) {
                max = Some(match max {
                    Some(cur) => cur.maximum(v),
                    None => v,
                });
            }
        }
        let max = max.ok_or_else(|| format!("softmax: row {} is fully masked", r))?;
        let mut sum = F::ZERO;
        let out_row = &mut out[r * cols..(r + 1) * cols];
        for (j, &v) in row.iter().enumerate() {
            if row_mask.is_none_or(|m| m[j]) {
                let e = (v - max).exp();
                out_row[j] = e;
                sum += e;
            } else {
                out_row[j] = F::ZERO;
            }
        }
        for v in out_row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(())
}

/// Numerically stable log-softmax of a single row, in f64.
pub fn log_softmax_row_f64(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - log_sum).collect()
}
