//! Dense row-major tensors, the forward kernels shared by eager execution and
//! the autodiff graph, and the [`Backend`] abstraction the models are written
//! against.

mod backend;
mod graph;

pub use backend::{Backend, Eager};
pub use graph::{Gradients, Graph, Var};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Layer-norm epsilon used by every model in the crate.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("index {index} out of range for {len} rows")]
    Index { index: usize, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(TensorError::Shape { op, detail: detail.into() })
}

/// Storage precision tag, used by the weight-file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

/// Scalar element type. Implemented for `f32` (benchmarks) and `f64`
/// (gradient and equivalence checks).
pub trait Float:
    num_traits::Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a·b + beta * c` on strided row/column-major views.
    ///
    /// # Safety
    /// Strides and dimensions must describe valid regions of the slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("finite cast")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    fn to_le(self, out: &mut Vec<u8>);
    fn from_le(bytes: &[u8]) -> Self;
}

impl Float for f32 {
    const DTYPE: DType = DType::F32;

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc);
    }

    fn to_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Float for f64 {
    const DTYPE: DType = DType::F64;

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc);
    }

    fn to_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Dense tensor with row-major storage. `shape.iter().product() == data.len()`
/// always holds.
#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Float> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        write!(f, "Tensor{:?} {:?}", self.shape, preview)?;
        if self.data.len() > 8 {
            write!(f, "..")?;
        }
        Ok(())
    }
}

impl<F: Float> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return shape_err(
                "new",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            );
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: F) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("from_rows", "ragged rows");
        }
        Ok(Self { shape: vec![rows.len(), cols], data: rows.concat() })
    }

    /// Random uniform values in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| F::of(rng.gen_range(-bound..=bound))).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| G::of(x.as_f64())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Gather the given rows of a 2-D tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let c = self.cols();
        let n = self.rows();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(TensorError::Index { index: r, len: n });
            }
            data.extend_from_slice(self.row(r));
        }
        Ok(Self { shape: vec![rows.len(), c], data })
    }
}

fn require_2d<F: Float>(op: &'static str, t: &Tensor<F>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => shape_err(op, format!("expected a matrix, got {s:?}")),
    }
}

/// Matrix product of 2-D tensors, optionally transposing either operand.
pub fn matmul_ex<F: Float>(a: &Tensor<F>, trans_a: bool, b: &Tensor<F>, trans_b: bool) -> Result<Tensor<F>> {
    let (ar, ac) = require_2d("matmul", a)?;
    let (br, bc) = require_2d("matmul", b)?;
    let (m, k, rsa, csa) = if trans_a { (ac, ar, 1, ac as isize) } else { (ar, ac, ac as isize, 1) };
    let (k2, n, rsb, csb) = if trans_b { (bc, br, 1, bc as isize) } else { (br, bc, bc as isize, 1) };
    if k != k2 {
        return shape_err("matmul", format!("inner dims {k} vs {k2} ({:?} x {:?})", a.shape, b.shape));
    }
    let mut out = Tensor::zeros(&[m, n]);
    if m == 0 || n == 0 || k == 0 {
        return Ok(out);
    }
    // SAFETY: dimensions and strides were derived from the checked shapes above.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(out)
}

pub fn matmul<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    matmul_ex(a, false, b, false)
}

/// How the right operand of a binary op lines up with the left one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Broadcast {
    Same,
    /// Right operand is one row repeated over every row of the left.
    Rows,
    Scalar,
}

pub fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    let bn: usize = b.iter().product();
    if a == b {
        Ok(Broadcast::Same)
    } else if bn == 1 {
        Ok(Broadcast::Scalar)
    } else if a.last() == Some(&bn) && (b.len() == 1 || (b.len() == 2 && b[0] == 1)) {
        Ok(Broadcast::Rows)
    } else {
        shape_err(op, format!("cannot broadcast {b:?} onto {a:?}"))
    }
}

fn binary<F: Float>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
    let kind = broadcast_kind(op, &a.shape, &b.shape)?;
    let data = match kind {
        Broadcast::Same => a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Scalar => {
            let y = b.data[0];
            a.data.iter().map(|&x| f(x, y)).collect()
        }
        Broadcast::Rows => {
            let c = b.data.len();
            a.data.iter().enumerate().map(|(i, &x)| f(x, b.data[i % c])).collect()
        }
    };
    Ok(Tensor { shape: a.shape.clone(), data })
}

pub fn add<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    binary("add", a, b, |x, y| x + y)
}

pub fn mul<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    binary("mul", a, b, |x, y| x * y)
}

pub fn scale<F: Float>(a: &Tensor<F>, s: F) -> Tensor<F> {
    a.map(|x| x * s)
}

pub fn relu<F: Float>(a: &Tensor<F>) -> Tensor<F> {
    a.map(|x| if x > F::zero() { x } else { F::zero() })
}

pub fn sigmoid_scalar<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub fn sigmoid<F: Float>(a: &Tensor<F>) -> Tensor<F> {
    a.map(sigmoid_scalar)
}

pub fn tanh<F: Float>(a: &Tensor<F>) -> Tensor<F> {
    a.map(|x| x.tanh())
}

/// `(outer, axis_len, inner)` decomposition for reductions along `axis`.
fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return shape_err(op, format!("axis {axis} out of range for {shape:?}"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis` (max-subtracted).
pub fn softmax<F: Float>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    let (outer, len, inner) = split_axis("softmax", &x.shape, axis)?;
    let mut out = x.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut max = F::neg_infinity();
            for j in 0..len {
                max = max.max(x.data[idx(j)]);
            }
            let mut sum = F::zero();
            for j in 0..len {
                let e = (x.data[idx(j)] - max).exp();
                out.data[idx(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out.data[idx(j)] = out.data[idx(j)] / sum;
            }
        }
    }
    Ok(out)
}

/// Softmax along the last axis, in place on a row slice.
pub fn softmax_in_place<F: Float>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Log-softmax of one row, in place.
pub fn log_softmax_in_place<F: Float>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for v in row.iter_mut() {
        *v = *v - lse;
    }
}

/// Statistics saved by the layer-norm forward for its backward pass.
pub struct LayerNormStats<F> {
    /// Normalized input before the affine transform.
    pub normalized: Tensor<F>,
    /// `1 / sqrt(var + eps)` per row.
    pub inv_std: Vec<F>,
}

pub fn layer_norm_with_stats<F: Float>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    bias: &Tensor<F>,
    eps: f64,
) -> Result<(Tensor<F>, LayerNormStats<F>)> {
    let c = x.cols();
    if c < 2 {
        return shape_err("layer_norm", "normalized dimension must be >= 2");
    }
    if gain.numel() != c || bias.numel() != c {
        return shape_err("layer_norm", format!("affine params {:?}/{:?} for width {c}", gain.shape, bias.shape));
    }
    let eps = F::of(eps);
    let n = F::of(c as f64);
    let rows = x.rows();
    let mut normalized = Tensor::zeros(&x.shape);
    let mut out = Tensor::zeros(&x.shape);
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = x.row(r);
        let mean = xr.iter().copied().sum::<F>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let rstd = F::one() / (var + eps).sqrt();
        inv_std.push(rstd);
        let nr = normalized.row_mut(r);
        for j in 0..c {
            nr[j] = (xr[j] - mean) * rstd;
        }
        let nr = normalized.row(r).to_vec();
        let or = out.row_mut(r);
        for j in 0..c {
            or[j] = nr[j] * gain.data[j] + bias.data[j];
        }
    }
    Ok((out, LayerNormStats { normalized, inv_std }))
}

/// Layer normalization over the last axis.
pub fn layer_norm<F: Float>(x: &Tensor<F>, gain: &Tensor<F>, bias: &Tensor<F>, eps: f64) -> Result<Tensor<F>> {
    layer_norm_with_stats(x, gain, bias, eps).map(|(y, _)| y)
}

/// Row lookup: `out[i] = table[ids[i]]`.
pub fn embedding<F: Float>(table: &Tensor<F>, ids: &[usize]) -> Result<Tensor<F>> {
    require_2d("embedding", table)?;
    table.select_rows(ids)
}

pub fn concat<F: Float>(parts: &[&Tensor<F>], axis: usize) -> Result<Tensor<F>> {
    let first = match parts.first() {
        Some(p) => p,
        None => return shape_err("concat", "no inputs"),
    };
    let nd = first.shape.len();
    if axis >= nd {
        return shape_err("concat", format!("axis {axis} for rank {nd}"));
    }
    for p in parts {
        let same_rank = p.shape.len() == nd;
        let compatible = same_rank && (0..nd).all(|d| d == axis || p.shape[d] == first.shape[d]);
        if !compatible {
            return shape_err("concat", format!("{:?} vs {:?} along axis {axis}", first.shape, p.shape));
        }
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut shape = first.shape.clone();
    shape[axis] = total;
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor { shape, data })
}

/// Half-open slice `[start, end)` along `axis`.
pub fn slice<F: Float>(x: &Tensor<F>, axis: usize, start: usize, end: usize) -> Result<Tensor<F>> {
    let (outer, len, inner) = split_axis("slice", &x.shape, axis)?;
    if start > end || end > len {
        return shape_err("slice", format!("[{start}, {end}) on axis of length {len}"));
    }
    let mut shape = x.shape.clone();
    shape[axis] = end - start;
    let mut data = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        let base = o * len * inner;
        data.extend_from_slice(&x.data[base + start * inner..base + end * inner]);
    }
    Ok(Tensor { shape, data })
}

pub fn transpose<F: Float>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let (r, c) = require_2d("transpose", x)?;
    let mut data = vec![F::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = x.data[i * c + j];
        }
    }
    Ok(Tensor { shape: vec![c, r], data })
}

pub fn sum<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    Tensor::scalar(x.data.iter().copied().sum())
}

/// Inverted-dropout mask: entries are `0` with probability `p`, else `1/(1-p)`.
pub fn dropout_mask<F: Float, R: Rng + ?Sized>(shape: &[usize], p: f64, rng: &mut R) -> Tensor<F> {
    let keep = F::of(1.0 / (1.0 - p));
    let n = shape.iter().product();
    let data = (0..n).map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep }).collect();
    Tensor { shape: shape.to_vec(), data }
}

/// Label-smoothed cross-entropy averaged over non-ignored rows:
/// `(1-eps) * nll + eps * mean_j(-log p_j)`. Returns the loss and the
/// per-row softmax probabilities (needed by the backward pass).
pub fn smoothed_cross_entropy<F: Float>(
    logits: &Tensor<F>,
    targets: &[usize],
    eps: f64,
    ignore: Option<usize>,
) -> Result<(F, Tensor<F>, usize)> {
    let (rows, vocab) = require_2d("cross_entropy", logits)?;
    if targets.len() != rows {
        return shape_err("cross_entropy", format!("{} targets for {rows} rows", targets.len()));
    }
    let probs = softmax(logits, 1)?;
    let eps_f = F::of(eps);
    let mut total = F::zero();
    let mut count = 0usize;
    for (r, &t) in targets.iter().enumerate() {
        if Some(t) == ignore {
            continue;
        }
        if t >= vocab {
            return Err(TensorError::Index { index: t, len: vocab });
        }
        let mut row = logits.row(r).to_vec();
        log_softmax_in_place(&mut row);
        let nll = -row[t];
        let smooth = -row.iter().copied().sum::<F>() / F::of(vocab as f64);
        total += (F::one() - eps_f) * nll + eps_f * smooth;
        count += 1;
    }
    let loss = if count == 0 { F::zero() } else { total / F::of(count as f64) };
    Ok((loss, probs, count))
}
