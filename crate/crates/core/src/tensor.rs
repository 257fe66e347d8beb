//! Dense row-major tensors with a runtime precision tag.
//!
//! Scalars are held as `f64`. A [`Precision::Single`] tensor stores only
//! values that are exactly representable as `f32`: every kernel computes in
//! `f64` internally and rounds its *outputs* to the tensor precision, so a
//! single-precision pipeline loses exactly what `f32` storage loses between
//! operations.
//!
//! Reductions run left to right over the reduced index. `matmul` accumulates
//! `c[i][j]` as `((a[i][0]*b[0][j] + a[i][1]*b[1][j]) + ...)` starting from
//! `0.0`, which makes every output bitwise reproducible.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::Single => x as f32 as f64,
            Precision::Double => x,
        }
    }

    pub fn epsilon(self) -> f64 {
        match self {
            Precision::Single => f32::EPSILON as f64,
            Precision::Double => f64::EPSILON,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Single => "single",
            Precision::Double => "double",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(Error::config(
                "precision",
                format!("expected `single` or `double`, got `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "dimensions must be positive and rank at least 1".into(),
        });
    }
    Ok(shape.iter().product())
}

impl Tensor {
    /// Build a tensor, rounding `data` to `precision` and rejecting non-finite values.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>, precision: Precision) -> Result<Self> {
        Self::build("from_vec", shape, data, precision)
    }

    pub(crate) fn build(
        op: &'static str,
        shape: Vec<usize>,
        mut data: Vec<f64>,
        precision: Precision,
    ) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("data length {} does not match", data.len()),
            });
        }
        for v in data.iter_mut() {
            *v = precision.round(*v);
            if !v.is_finite() {
                return Err(Error::NonFinite { op });
            }
        }
        Ok(Self {
            shape,
            data,
            precision,
        })
    }

    pub fn zeros(shape: &[usize], precision: Precision) -> Result<Self> {
        Self::full(shape, 0.0, precision)
    }

    pub fn full(shape: &[usize], value: f64, precision: Precision) -> Result<Self> {
        let n = check_shape(shape)?;
        Self::build("full", shape.to_vec(), vec![value; n], precision)
    }

    /// Entries drawn from N(0, std²).
    pub fn randn(shape: &[usize], std: f64, precision: Precision, rng: &mut Rng) -> Result<Self> {
        let n = check_shape(shape)?;
        let data = (0..n).map(|_| std * rng.normal()).collect();
        Self::build("randn", shape.to_vec(), data, precision)
    }

    /// Entries drawn uniformly from [lo, hi).
    pub fn uniform(
        shape: &[usize],
        lo: f64,
        hi: f64,
        precision: Precision,
        rng: &mut Rng,
    ) -> Result<Self> {
        let n = check_shape(shape)?;
        let data = (0..n).map(|_| lo + (hi - lo) * rng.next_f64()).collect();
        Self::build("uniform", shape.to_vec(), data, precision)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: vec![0.0; self.data.len()],
            precision: self.precision,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Number of rows when the tensor is viewed as `[rows x last_dim]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            precision: self.precision,
        })
    }

    pub fn to_precision(&self, precision: Precision) -> Result<Tensor> {
        Self::build("to_precision", self.shape.clone(), self.data.clone(), precision)
    }

    /// Bit-level equality of shape, precision and every scalar.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.precision == other.precision
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sum of elementwise products, accumulated left to right.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        if self.precision != other.precision {
            return Err(Error::PrecisionMismatch { op });
        }
        Ok(())
    }

    /// Apply `f` pointwise.
    pub fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        Self::build(
            op,
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
            self.precision,
        )
    }

    /// Pointwise binary op. `other` must have the same shape as `self`, or a
    /// shape equal to a trailing suffix of it (broadcast over leading axes).
    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.precision != other.precision {
            return Err(Error::PrecisionMismatch { op });
        }
        let suffix_ok = other.rank() <= self.rank()
            && self.shape[self.rank() - other.rank()..] == other.shape[..];
        if !suffix_ok {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let m = other.numel();
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &a)| f(a, other.data[i % m]))
            .collect();
        Self::build(op, self.shape.clone(), data, self.precision)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        self.map("scale", |v| v * s)
    }

    pub fn silu(&self) -> Result<Tensor> {
        self.map("silu", silu)
    }

    /// Derivative of SiLU evaluated at each entry.
    pub fn silu_grad(&self) -> Result<Tensor> {
        self.map("silu_grad", silu_grad)
    }

    /// 2-D matrix product `[m x k] x [k x n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.precision != other.precision {
            return Err(Error::PrecisionMismatch { op: "matmul" });
        }
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let a_row = &self.data[i * k..(i + 1) * k];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (c, &b) in row.iter_mut().zip(b_row) {
                    *c += a * b;
                }
            }
        }
        Self::build("matmul", vec![m, n], out, self.precision)
    }

    /// `self x other^T` for `[m x k]` and `[n x k]`, each entry a left-to-right dot product.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        if self.precision != other.precision {
            return Err(Error::PrecisionMismatch { op: "matmul_nt" });
        }
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[0]);
        let mut out = Vec::with_capacity(m * n);
        for a_row in self.data.chunks_exact(k) {
            for b_row in other.data.chunks_exact(k) {
                out.push(a_row.iter().zip(b_row).fold(0.0, |acc, (a, b)| acc + a * b));
            }
        }
        Self::build("matmul_nt", vec![m, n], out, self.precision)
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "transpose needs rank 2".into(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
            precision: self.precision,
        })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis {
                axis,
                rank: self.rank(),
            });
        }
        let len = self.shape[axis];
        if len == 0 {
            return Err(Error::EmptyAxis);
        }
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = vec![0.0; self.numel()];
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = self.data[idx(j)];
                }
                softmax_in_place(&mut buf);
                for (j, b) in buf.iter().enumerate() {
                    out[idx(j)] = *b;
                }
            }
        }
        Self::build("softmax", self.shape.clone(), out, self.precision)
    }

    /// Sum over every axis except the last, giving `[last_dim]`.
    pub fn sum_leading(&self) -> Result<Tensor> {
        let d = self.last_dim();
        let mut out = vec![0.0; d];
        for row in self.data.chunks_exact(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Self::build("sum_leading", vec![d], out, self.precision)
    }

    /// Split the last axis into `[0, at)` and `[at, last)`.
    pub fn split_last(&self, at: usize) -> Result<(Tensor, Tensor)> {
        let d = self.last_dim();
        if at == 0 || at >= d {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("cannot split last axis at {at}"),
            });
        }
        let mut left = Vec::with_capacity(self.rows() * at);
        let mut right = Vec::with_capacity(self.rows() * (d - at));
        for row in self.data.chunks_exact(d) {
            left.extend_from_slice(&row[..at]);
            right.extend_from_slice(&row[at..]);
        }
        let mut ls = self.shape.clone();
        let mut rs = self.shape.clone();
        *ls.last_mut().unwrap() = at;
        *rs.last_mut().unwrap() = d - at;
        Ok((
            Tensor {
                shape: ls,
                data: left,
                precision: self.precision,
            },
            Tensor {
                shape: rs,
                data: right,
                precision: self.precision,
            },
        ))
    }

    /// Concatenate along the last axis. Leading shapes must agree.
    pub fn concat_last(&self, other: &Tensor) -> Result<Tensor> {
        if self.precision != other.precision {
            return Err(Error::PrecisionMismatch { op: "concat_last" });
        }
        let lead_ok = self.rank() == other.rank()
            && self.shape[..self.rank() - 1] == other.shape[..other.rank() - 1];
        if !lead_ok {
            return Err(Error::ShapeMismatch {
                op: "concat_last",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (a, b) = (self.last_dim(), other.last_dim());
        let mut data = Vec::with_capacity(self.numel() + other.numel());
        for (ra, rb) in self.data.chunks_exact(a).zip(other.data.chunks_exact(b)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = a + b;
        Ok(Tensor {
            shape,
            data,
            precision: self.precision,
        })
    }

    /// Select rows of a `[rows x d]` view, giving `[indices.len() x d]`.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let d = self.last_dim();
        let rows = self.rows();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(Error::InvalidShape {
                    shape: self.shape.clone(),
                    reason: format!("row {i} out of range"),
                });
            }
            data.extend_from_slice(&self.data[i * d..(i + 1) * d]);
        }
        Tensor::build("gather_rows", vec![indices.len().max(1), d], data, self.precision)
    }

    /// Row `i` of the `[rows x d]` view.
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.precision == other.precision && self.data == other.data
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Max-subtracted softmax over a slice.
pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

/// Counter-based SplitMix64 generator.
///
/// The state is `(seed, counter)`; draw `n` depends only on those two values,
/// so streams are reproducible and can be forked without shared state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Independent stream keyed by `stream`.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng::new(mix64(self.seed ^ mix64(stream.wrapping_add(GOLDEN))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal draw (Box-Muller, one value per two uniforms).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
