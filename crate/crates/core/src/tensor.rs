//! Dense row-major tensors and the handful of kernels the engine needs.
//!
//! Every kernel is a pure function: inputs are borrowed immutably and a fresh
//! tensor is returned. Reductions run in a fixed loop order so repeated calls
//! with equal inputs are bit-identical.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::Range;

use num_traits::{FromPrimitive, ToPrimitive};
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Element type of a [`Tensor`]. Implemented for `f32` (default) and `f64`.
pub trait Float:
    num_traits::Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Width in bytes, used by the checkpoint format.
    const BYTES: usize;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Float")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Float converts to f64")
    }
}

impl Float for f32 {
    const BYTES: usize = 4;
}

impl Float for f64 {
    const BYTES: usize = 8;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("span {start}..{end} out of range for axis of length {len}")]
    Span { start: usize, end: usize, len: usize },
    #[error("degenerate attention row {row}: every key is masked")]
    DegenerateRow { row: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Debug> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != len
    {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            len,
        });
    }
    Ok(())
}

impl<F: Float> Tensor<F> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape, data.len())?;
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: F) -> Result<Self> {
        let shape = shape.into();
        let len = shape.iter().product();
        check_shape(&shape, len)?;
        Ok(Self {
            shape,
            data: vec![value; len],
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, F::zero())
    }

    /// `n × n` identity matrix.
    pub fn eye(n: usize) -> Result<Self> {
        let mut t = Self::zeros([n, n])?;
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        Ok(t)
    }

    /// Builds a 2-D tensor from `f(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::new([rows, cols], data)
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| F::from_f64_lossy(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a matrix (first axis).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a matrix (product of the trailing axes).
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn at(&self, row: usize, col: usize) -> F {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[F] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| G::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<F> {
        self.same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(F::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    fn same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::Shape {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, op: &'static str, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        self.same_shape(op, other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with("mul", other, |a, b| a * b)
    }

    pub fn scale(&self, s: F) -> Self {
        self.map(|v| v * s)
    }

    /// Adds a `1 × cols` row vector to every row.
    pub fn add_row(&self, row: &Self) -> Result<Self> {
        let cols = self.cols();
        if row.len() != cols {
            return Err(TensorError::Shape {
                op: "add_row",
                left: self.shape.clone(),
                right: row.shape.clone(),
            });
        }
        let mut out = self.clone();
        for chunk in out.data.chunks_mut(cols) {
            for (o, &b) in chunk.iter_mut().zip(&row.data) {
                *o = *o + b;
            }
        }
        Ok(out)
    }

    /// Multiplies every row elementwise by a `1 × cols` row vector.
    pub fn mul_row(&self, row: &Self) -> Result<Self> {
        let cols = self.cols();
        if row.len() != cols {
            return Err(TensorError::Shape {
                op: "mul_row",
                left: self.shape.clone(),
                right: row.shape.clone(),
            });
        }
        let mut out = self.clone();
        for chunk in out.data.chunks_mut(cols) {
            for (o, &b) in chunk.iter_mut().zip(&row.data) {
                *o = *o * b;
            }
        }
        Ok(out)
    }

    /// Matrix product. The accumulation order for each output entry is the
    /// inner index ascending, independent of thread count.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k, p) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![F::zero(); m * p];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * p..(i + 1) * p];
            for (kk, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[kk * p..(kk + 1) * p];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Self::new([m, p], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(TensorError::Shape {
                op: "transpose",
                left: self.shape.clone(),
                right: vec![],
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Self::new([c, r], out)
    }

    fn outer_inner(&self, axis: usize) -> Result<(usize, usize)> {
        if axis >= self.rank() {
            return Err(TensorError::Axis {
                axis,
                rank: self.rank(),
            });
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, inner))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or(TensorError::InvalidShape {
            shape: vec![],
            len: 0,
        })?;
        let (outer, inner) = first.outer_inner(axis)?;
        let mut shape = first.shape.clone();
        shape[axis] = 0;
        for p in parts {
            let mut expect = first.shape.clone();
            expect[axis] = p.shape.get(axis).copied().unwrap_or(0);
            if p.shape != expect {
                return Err(TensorError::Shape {
                    op: "concat",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            shape[axis] += p.shape[axis];
        }
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        Self::new(shape, data)
    }

    /// Extracts `span` along `axis`.
    pub fn slice(&self, axis: usize, span: Range<usize>) -> Result<Self> {
        let (outer, inner) = self.outer_inner(axis)?;
        let len = self.shape[axis];
        if span.start >= span.end || span.end > len {
            return Err(TensorError::Span {
                start: span.start,
                end: span.end,
                len,
            });
        }
        let mut shape = self.shape.clone();
        shape[axis] = span.len();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&self.data[base + span.start * inner..base + span.end * inner]);
        }
        Self::new(shape, data)
    }

    /// Row-wise normalisation to zero mean and unit variance.
    pub fn layer_norm(&self, eps: F) -> Self {
        let cols = self.cols();
        let n = F::from_usize(cols).unwrap();
        let mut out = self.clone();
        for row in out.data.chunks_mut(cols) {
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let inv = F::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        out
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Self {
        self.map(gelu_scalar)
    }

    /// Row softmax of `self + additive_mask`, with per-row max subtraction.
    /// A row whose entries are all `-inf` after masking is an error.
    pub fn softmax_rows(&self, additive_mask: Option<&Self>) -> Result<Self> {
        if self.rank() != 2 {
            return Err(TensorError::Shape {
                op: "softmax_rows",
                left: self.shape.clone(),
                right: vec![],
            });
        }
        if let Some(m) = additive_mask {
            self.same_shape("softmax_rows", m)?;
        }
        let cols = self.cols();
        let mut out = self.data.clone();
        for (r, row) in out.chunks_mut(cols).enumerate() {
            if let Some(m) = additive_mask {
                for (v, &mv) in row.iter_mut().zip(&m.data[r * cols..(r + 1) * cols]) {
                    *v = *v + mv;
                }
            }
            softmax_in_place(row).map_err(|_| TensorError::DegenerateRow { row: r })?;
        }
        Self::new(self.shape.clone(), out)
    }

    /// Standard-normal samples drawn from `rng`.
    pub fn randn(rng: &mut Rng, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let len = shape.iter().product();
        check_shape(&shape, len)?;
        let data = (0..len).map(|_| F::from_f64_lossy(rng.normal())).collect();
        Self::new(shape, data)
    }
}

pub(crate) fn gelu_scalar<F: Float>(x: F) -> F {
    let c = F::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = F::from_f64_lossy(0.044715);
    let half = F::from_f64_lossy(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar<F: Float>(x: F) -> F {
    let c = F::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = F::from_f64_lossy(0.044715);
    let half = F::from_f64_lossy(0.5);
    let three = F::from_f64_lossy(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (F::one() + three * k * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

/// Softmax of one row in place. `Err(())` when every entry is `-inf`.
pub(crate) fn softmax_in_place<F: Float>(row: &mut [F]) -> std::result::Result<(), ()> {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return Err(());
    }
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
    Ok(())
}

/// Seeded random stream.
///
/// Backed by ChaCha8 in counter mode, which produces the same `u64` stream
/// on every platform for a given seed. Normal variates are drawn with the
/// `rand_distr` ziggurat sampler on top of that stream.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Seed of sub-stream `index`: first 8 bytes (little endian) of
    /// SHA-256 over `seed.to_le_bytes() ‖ index.to_le_bytes()`.
    pub fn derive_seed(seed: u64, index: u64) -> u64 {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(index.to_le_bytes());
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    /// Independent sub-stream; does not advance `self`.
    pub fn derive(&self, index: u64) -> Rng {
        Rng::new(Self::derive_seed(self.seed, index))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            for j in 0..p {
                let mut s = 0.0;
                for q in 0..k {
                    s += a.data()[i * k + q] * b.data()[q * p + j];
                }
                out[i * p + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_small_cases() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(a.matmul(&Tensor::eye(2).unwrap()).unwrap(), a);
        let r = t(&[1, 2], &[1., 2.]).matmul(&t(&[2, 1], &[3., 4.])).unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(7);
        let a = Tensor::<f64>::randn(&mut rng, [5, 7]).unwrap();
        let b = Tensor::<f64>::randn(&mut rng, [7, 3]).unwrap();
        let got = a.matmul(&b).unwrap();
        for (g, e) in got.data().iter().zip(triple_loop(&a, &b)) {
            assert!((g - e).abs() <= 1e-6 * e.abs().max(1e-12), "{g} vs {e}");
        }
        // f32 path against the same oracle
        let got32 = a.cast::<f32>().matmul(&b.cast::<f32>()).unwrap();
        for (g, e) in got32.data().iter().zip(triple_loop(&a, &b)) {
            assert!(((*g as f64) - e).abs() <= 1e-5 * e.abs().max(1.0));
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = t(&[2, 3], &[0.; 6])
            .matmul(&t(&[2, 3], &[0.; 6]))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = t(&[1, 2], &[2.0, 0.0]).softmax_rows(None).unwrap();
        let e2 = 2f64.exp();
        assert!((s.data()[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((s.data()[0] - 0.8808).abs() < 1e-4);

        let s = t(&[1, 3], &[4.2, 4.2, 4.2]).softmax_rows(None).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let mask = t(&[1, 2], &[0.0, f64::NEG_INFINITY]);
        let s = t(&[1, 2], &[1.0, 5.0]).softmax_rows(Some(&mask)).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_row_is_error() {
        let mask = t(&[2, 2], &[0.0, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
        let err = t(&[2, 2], &[1., 2., 3., 4.])
            .softmax_rows(Some(&mask))
            .unwrap_err();
        assert_eq!(err, TensorError::DegenerateRow { row: 1 });
    }

    #[test]
    fn randn_determinism_and_moments() {
        let a = Tensor::<f32>::randn(&mut Rng::new(3), [4, 5]).unwrap();
        let b = Tensor::<f32>::randn(&mut Rng::new(3), [4, 5]).unwrap();
        let c = Tensor::<f32>::randn(&mut Rng::new(4), [4, 5]).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());

        let x = Tensor::<f64>::randn(&mut Rng::new(11), [100_000]).unwrap();
        let n = x.len() as f64;
        let mean = x.data().iter().sum::<f64>() / n;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() <= 0.02, "mean {mean}");
        assert!((var - 1.0).abs() <= 0.05, "var {var}");
    }

    #[test]
    fn derive_does_not_advance_parent() {
        let mut a = Rng::new(9);
        let _ = a.derive(3);
        let mut b = Rng::new(9);
        assert_eq!(a.next_u64(), b.next_u64());
        assert_eq!(Rng::new(9).derive(3).seed(), Rng::derive_seed(9, 3));
        assert_ne!(Rng::derive_seed(9, 3), Rng::derive_seed(9, 4));
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[2, 1], &[7., 8.]);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1., 2., 3., 7., 4., 5., 6., 8.]);
        assert_eq!(c.slice(1, 0..3).unwrap(), a);
        assert_eq!(c.slice(1, 3..4).unwrap(), b);
        let r = Tensor::concat(&[&a, &a], 0).unwrap();
        assert_eq!(r.shape(), &[4, 3]);
        assert_eq!(r.slice(0, 2..4).unwrap(), a);
        assert!(c.slice(1, 2..9).is_err());
    }

    #[test]
    fn layer_norm_and_gelu() {
        let x = t(&[1, 4], &[1., 2., 3., 4.]);
        let y = x.layer_norm(0.0);
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);

        let g = t(&[1, 3], &[0.0, 10.0, -10.0]).gelu();
        assert_eq!(g.data()[0], 0.0);
        assert!((g.data()[1] - 10.0).abs() < 1e-9 && g.data()[2].abs() < 1e-9);
        // derivative against central differences
        for &x in &[-2.0f64, -0.3, 0.0, 0.7, 1.9] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(Tensor::<f32>::new([2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::zeros([0, 2]).is_err());
    }

    mod props {
        use super::{Rng, Tensor};
        use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest};

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one_and_shift_invariant(
                vals in prop::collection::vec(-30.0f64..30.0, 1..12),
                shift in -50.0f64..50.0,
            ) {
                let n = vals.len();
                let x = Tensor::from_f64([1, n], &vals).unwrap();
                let s = x.softmax_rows(None).unwrap();
                let total: f64 = s.data().iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-6);
                prop_assert!(s.data().iter().all(|&v| v >= 0.0));
                let shifted = x.map(|v| v + shift).softmax_rows(None).unwrap();
                prop_assert!(s.max_abs_diff(&shifted).unwrap() <= 1e-9);
            }

            #[test]
            fn matmul_identity_exact(r in 1usize..6, c in 1usize..6, seed in any::<u64>()) {
                let a = Tensor::<f32>::randn(&mut Rng::new(seed), [r, c]).unwrap();
                prop_assert_eq!(a.matmul(&Tensor::eye(c).unwrap()).unwrap(), a.clone());
            }

            #[test]
            fn kernels_are_pure(seed in any::<u64>()) {
                let a = Tensor::<f32>::randn(&mut Rng::new(seed), [3, 4]).unwrap();
                let b = Tensor::<f32>::randn(&mut Rng::new(seed ^ 1), [4, 2]).unwrap();
                let a0 = a.clone();
                let p1 = a.matmul(&b).unwrap();
                let p2 = a.matmul(&b).unwrap();
                prop_assert_eq!(&a, &a0);
                prop_assert_eq!(p1.data(), p2.data());
                prop_assert_eq!(a.softmax_rows(None).unwrap(), a.softmax_rows(None).unwrap());
            }
        }
    }
}
