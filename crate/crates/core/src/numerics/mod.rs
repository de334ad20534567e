//! Dense row-major tensors, a reverse-mode autodiff graph over them, and a
//! central-difference gradient checker.
//!
//! Values are stored as `f64`. The thread-local [`Precision`] flag selects
//! between full 64-bit arithmetic (the default, required for gradient
//! checking) and emulated 32-bit storage, where every op output is rounded
//! through `f32`. Reductions accumulate sequentially so results are bit-identical
//! for identical inputs.

mod autograd;
pub mod elvt;
mod gradcheck;
pub mod params;

use std::cell::Cell;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{bail, Error, Result};

pub use autograd::{no_grad, ComputeGraph, Mask, RowMix, Var};
pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use params::{Binder, Parameters};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

thread_local! {
    static PRECISION: Cell<Precision> = const { Cell::new(Precision::F64) };
    static MAC_COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

pub fn precision() -> Precision {
    PRECISION.with(|p| p.get())
}

/// Runs `f` with the given precision mode, restoring the previous one after.
pub fn with_precision<R>(p: Precision, f: impl FnOnce() -> R) -> R {
    let prev = PRECISION.with(|c| c.replace(p));
    let out = f();
    PRECISION.with(|c| c.set(prev));
    out
}

pub(crate) fn round_to_precision(data: &mut [f64]) {
    if precision() == Precision::F32 {
        for v in data.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// Counts matmul multiply-adds issued by forward ops while `f` runs.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let prev = MAC_COUNTER.with(|c| c.replace(Some(0)));
    let out = f();
    let n = MAC_COUNTER.with(|c| c.replace(prev)).unwrap_or(0);
    if let Some(p) = prev {
        MAC_COUNTER.with(|c| c.set(Some(p + n)));
    }
    (out, n)
}

pub(crate) fn record_macs(n: u64) {
    MAC_COUNTER.with(|c| {
        if let Some(v) = c.get() {
            c.set(Some(v + n));
        }
    });
}

/// `c = a·b + beta·c` with explicit strides; `a` is m×k, `b` is k×n, `c` is m×n row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// A dense row-major tensor. `product(shape) == data.len()` always holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            bail!(Dimension, "extents must be positive, got {shape:?}");
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            bail!(
                Dimension,
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            );
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            bail!(Dimension, "from_rows needs at least one row");
        };
        let d = first.len();
        if rows.iter().any(|r| r.len() != d) {
            bail!(Dimension, "ragged rows");
        }
        Tensor::new(vec![rows.len(), d], rows.concat())
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a matrix view: the leading extent, or 1 for vectors.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Column count of a matrix view: product of trailing extents.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            self.shape[0]
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, what: &str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{what} produced non-finite value {} at flat index {i}",
                self.data[i]
            )));
        }
        Ok(())
    }

    /// Plain (untracked) matrix product, counted by the MAC instrumentation.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            bail!(Dimension, "matmul needs rank-2 operands");
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            bail!(
                Dimension,
                "matmul inner dimensions disagree: {m}x{k} by {k2}x{n}"
            );
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, (k, 1), &other.data, (n, 1), &mut out, 0.0);
        record_macs((m * k * n) as u64);
        round_to_precision(&mut out);
        let t = Tensor::new(vec![m, n], out)?;
        t.ensure_finite("matmul")?;
        Ok(t)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            bail!(Dimension, "transpose needs a matrix");
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Left-to-right sum of all elements.
    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc + v)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Little-endian f64 bytes of shape and data, for hashing.
    pub fn to_hash_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * (self.shape.len() + self.data.len()));
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity, or `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_hand_case() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(eye.matmul(&b).unwrap(), b);
        let row = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let col = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(row.matmul(&col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn mac_counter_counts_mkn() {
        let a = Tensor::zeros(&[3, 4]);
        let b = Tensor::zeros(&[4, 5]);
        let (_, n) = count_macs(|| a.matmul(&b).unwrap());
        assert_eq!(n, 3 * 4 * 5);
        // no counting outside an instrumented region
        let (_, outer) = count_macs(|| {
            let (_, inner) = count_macs(|| a.matmul(&b).unwrap());
            assert_eq!(inner, 60);
        });
        assert_eq!(outer, 60);
    }

    #[test]
    fn f32_mode_rounds_outputs() {
        let a = Tensor::new(vec![1, 1], vec![1.0 / 3.0]).unwrap();
        let b = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let hi = a.matmul(&b).unwrap().item();
        let lo = with_precision(Precision::F32, || a.matmul(&b).unwrap().item());
        assert_eq!(lo, (1.0f64 / 3.0) as f32 as f64);
        assert_ne!(hi, lo);
        assert_eq!(precision(), Precision::F64);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }
}
