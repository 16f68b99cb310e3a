//! Dense numeric kernels shared by the inference path and the autodiff tape.
//!
//! Every kernel is a pure function of its inputs. Model state is stored in
//! `f32`; the same code instantiates at `f64` for gradient checking.

mod scalar;
pub mod tape;

pub use scalar::Scalar;
pub use tape::{gradient, Tape, Var};

use crate::error::{Error, Result};

/// Default epsilon for [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Base of the rotary frequency ladder.
pub const ROTARY_BASE: f64 = 10_000.0;

/// A row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor2<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor2<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Length {
                op: "Tensor2::from_vec",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
    }

    /// A single-row tensor.
    pub fn row(data: Vec<T>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_slice_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise conversion to another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor2<U> {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn ensure_finite(&self, name: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                tensor: name.to_string(),
            })
        }
    }
}

/// `a · b`.
pub fn matmul<T: Scalar>(a: &Tensor2<T>, b: &Tensor2<T>) -> Result<Tensor2<T>> {
    if a.cols != b.rows {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Tensor2::zeros(a.rows, b.cols);
    matmul_into(&a.data, &b.data, &mut out.data, a.rows, a.cols, b.cols);
    Ok(out)
}

/// `a · bᵀ`.
pub fn matmul_nt<T: Scalar>(a: &Tensor2<T>, b: &Tensor2<T>) -> Result<Tensor2<T>> {
    if a.cols != b.cols {
        return Err(Error::Dimension {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let n = b.rows;
    let mut out = Tensor2::zeros(a.rows, n);
    for i in 0..a.rows {
        let ar = a.row_slice(i);
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            *o = dot(ar, b.row_slice(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b`.
pub fn matmul_tn<T: Scalar>(a: &Tensor2<T>, b: &Tensor2<T>) -> Result<Tensor2<T>> {
    if a.rows != b.rows {
        return Err(Error::Dimension {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, n) = (a.cols, b.cols);
    let mut out = Tensor2::zeros(m, n);
    for r in 0..a.rows {
        let ar = a.row_slice(r);
        let br = b.row_slice(r);
        for (i, &av) in ar.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out.data[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// Row-major `out += a(m×k) · b(k×n)`; `out` must be zeroed by the caller
/// when a plain product is wanted.
pub(crate) fn matmul_into<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Adds `bias` (length `cols`) to every row.
pub fn add_row_bias<T: Scalar>(x: &mut Tensor2<T>, bias: &[T]) {
    debug_assert_eq!(x.cols, bias.len());
    for r in 0..x.rows {
        for (v, &b) in x.row_slice_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// `x · w + bias`.
pub fn linear<T: Scalar>(x: &Tensor2<T>, w: &Tensor2<T>, bias: &Tensor2<T>) -> Result<Tensor2<T>> {
    let mut y = matmul(x, w)?;
    if bias.len() != y.cols {
        return Err(Error::Length {
            op: "linear bias",
            expected: y.cols,
            actual: bias.len(),
        });
    }
    add_row_bias(&mut y, bias.data());
    Ok(y)
}

/// Numerically stable softmax over a single slice, in place.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax applied independently to each row.
pub fn softmax_rows<T: Scalar>(m: &Tensor2<T>) -> Result<Tensor2<T>> {
    if m.data.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite {
            tensor: "softmax_rows input".into(),
        });
    }
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_slice_mut(r));
    }
    Ok(out)
}

/// Normalizes `x` to zero mean and unit variance, then applies `gamma` and
/// `beta`. A zero-variance row normalizes to exactly zero, so the output
/// is `beta`.
pub fn layer_norm<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], eps: T) -> Result<Vec<T>> {
    if gamma.len() != x.len() || beta.len() != x.len() {
        return Err(Error::Length {
            op: "layer_norm",
            expected: x.len(),
            actual: if gamma.len() != x.len() {
                gamma.len()
            } else {
                beta.len()
            },
        });
    }
    let mut out = vec![T::zero(); x.len()];
    layer_norm_row(x, gamma, beta, eps, &mut out);
    Ok(out)
}

/// Returns `(mean, 1/sqrt(var + eps))` and writes the normalized, affine
/// transformed row to `out`.
pub(crate) fn layer_norm_row<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
    out: &mut [T],
) -> (T, T) {
    let n = T::from_usize(x.len()).unwrap();
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + eps).sqrt();
    let constant = x.iter().all(|&v| v == x[0]);
    for i in 0..x.len() {
        let xhat = if constant {
            T::zero()
        } else {
            (x[i] - mean) * rstd
        };
        out[i] = xhat * gamma[i] + beta[i];
    }
    (if constant { x[0] } else { mean }, rstd)
}

/// Row-wise layer norm over a matrix.
pub fn layer_norm_rows<T: Scalar>(
    x: &Tensor2<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<Tensor2<T>> {
    if gamma.len() != x.cols || beta.len() != x.cols {
        return Err(Error::Length {
            op: "layer_norm_rows",
            expected: x.cols,
            actual: gamma.len().min(beta.len()),
        });
    }
    let mut out = Tensor2::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let c = x.cols;
        layer_norm_row(
            x.row_slice(r),
            gamma,
            beta,
            eps,
            &mut out.data[r * c..(r + 1) * c],
        );
    }
    Ok(out)
}

fn rotary_theta(pair: usize, head_dim: usize) -> f64 {
    ROTARY_BASE.powf(-2.0 * pair as f64 / head_dim as f64)
}

/// Rotates consecutive pairs `(v[2t], v[2t+1])` by `position · θ_t`, with
/// `θ_t = 10000^(-2t/d_k)`.
pub fn rotary_apply<T: Scalar>(v: &[T], position: usize) -> Result<Vec<T>> {
    if !v.len().is_multiple_of(2) {
        return Err(Error::Length {
            op: "rotary_apply (head dim must be even)",
            expected: v.len() + 1,
            actual: v.len(),
        });
    }
    let mut out = v.to_vec();
    rotary_in_place(&mut out, position as f64, false);
    Ok(out)
}

/// In-place rotary on one head vector. `inverse` rotates by the negative
/// angle, which is the adjoint used during backpropagation.
pub(crate) fn rotary_in_place<T: Scalar>(v: &mut [T], position: f64, inverse: bool) {
    let d = v.len();
    if position == 0.0 {
        return;
    }
    for t in 0..d / 2 {
        let mut angle = rotary_theta(t, d) * position;
        if inverse {
            angle = -angle;
        }
        let (s, c) = angle.sin_cos();
        let (s, c) = (T::of(s), T::of(c));
        let (a, b) = (v[2 * t], v[2 * t + 1]);
        v[2 * t] = a * c - b * s;
        v[2 * t + 1] = a * s + b * c;
    }
}

/// Applies rotary to every `head_dim`-wide block of every row; row `r` sits
/// at position `positions[r]`.
pub(crate) fn rotary_rows<T: Scalar>(
    x: &mut Tensor2<T>,
    head_dim: usize,
    positions: &[usize],
    inverse: bool,
) {
    debug_assert_eq!(positions.len(), x.rows);
    for (r, &p) in positions.iter().enumerate() {
        for head in x.row_slice_mut(r).chunks_mut(head_dim) {
            rotary_in_place(head, p as f64, inverse);
        }
    }
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor2<T>, targets: &[usize]) -> Result<T> {
    if targets.len() != logits.rows {
        return Err(Error::Length {
            op: "cross_entropy targets",
            expected: logits.rows,
            actual: targets.len(),
        });
    }
    let mut total = T::zero();
    for (r, &t) in targets.iter().enumerate() {
        if t >= logits.cols {
            return Err(Error::Index {
                what: "cross_entropy target",
                index: t,
                bound: logits.cols,
            });
        }
        let row = logits.row_slice(r);
        total += log_sum_exp(row) - row[t];
    }
    Ok(total / T::from_usize(targets.len().max(1)).unwrap())
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum = row.iter().map(|&v| (v - max).exp()).sum::<T>();
    max + sum.ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let three = T::of(3.0);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}
