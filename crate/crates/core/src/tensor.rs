//! Dense row-major f64 matrices.
//!
//! Everything the differentiable graph touches is a 2-D matrix; vectors are
//! n x 1 columns and scalars are 1 x 1. Matrix products run through
//! `matrixmultiply::dgemm`, which picks SIMD kernels at runtime; transposed
//! operands are expressed through strides so backward passes never
//! materialize a transpose.

use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must match shape");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(1, 1, vec![v])
    }

    /// Filled with a constant.
    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    /// Uniform draws from [lo, hi).
    pub fn random_uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.range(lo, hi)).collect();
        Tensor { rows, cols, data }
    }

    /// Normal draws scaled by `std`.
    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
        Tensor { rows, cols, data }
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

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Single value of a 1 x 1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar {:?}", self.shape());
        self.data[0]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Columns `start .. start + len` as a new tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor {
        assert!(start + len <= self.cols);
        let mut out = Tensor::zeros(self.rows, len);
        for r in 0..self.rows {
            let src = r * self.cols + start;
            let dst = r * len;
            out.data[dst..dst + len].copy_from_slice(&self.data[src..src + len]);
        }
        out
    }
}

/// Which side of a product is transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

/// General product `out = alpha * op(a) * op(b) + beta * out`.
///
/// `op` is identity or transpose per the `Trans` flags; dimensions are those
/// of the operands after `op`. Callers guarantee conformability.
pub fn gemm(
    alpha: f64,
    a: &Tensor,
    ta: Trans,
    b: &Tensor,
    tb: Trans,
    beta: f64,
    out: &mut Tensor,
) {
    let (m, k) = match ta {
        Trans::No => (a.rows, a.cols),
        Trans::Yes => (a.cols, a.rows),
    };
    let (kb, n) = match tb {
        Trans::No => (b.rows, b.cols),
        Trans::Yes => (b.cols, b.rows),
    };
    assert_eq!(k, kb, "gemm inner dims {k} vs {kb}");
    assert_eq!((out.rows, out.cols), (m, n), "gemm output shape");

    // Row-major strides; a transpose swaps them.
    let (rsa, csa) = match ta {
        Trans::No => (a.cols as isize, 1),
        Trans::Yes => (1, a.cols as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (b.cols as isize, 1),
        Trans::Yes => (1, b.cols as isize),
    };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a * b` allocating the output.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows(), b.cols());
    gemm(1.0, a, Trans::No, b, Trans::No, 0.0, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn gemm_transposed_matches_explicit_transpose() {
        let mut rng = Rng::new(5);
        let a = Tensor::random_uniform(4, 3, -1.0, 1.0, &mut rng);
        let b = Tensor::random_uniform(4, 5, -1.0, 1.0, &mut rng);
        // a^T * b via strides vs via materialized transpose.
        let mut fast = Tensor::zeros(3, 5);
        gemm(1.0, &a, Trans::Yes, &b, Trans::No, 0.0, &mut fast);
        let slow = matmul(&a.transpose(), &b);
        for (x, y) in fast.iter().zip(slow.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_accumulates_with_beta() {
        let a = Tensor::from_vec(1, 2, vec![1.0, 2.0]);
        let b = Tensor::from_vec(2, 1, vec![3.0, 4.0]);
        let mut out = Tensor::from_vec(1, 1, vec![100.0]);
        gemm(1.0, &a, Trans::No, &b, Trans::No, 1.0, &mut out);
        assert_eq!(out.item(), 111.0);
    }

    #[test]
    fn slice_cols_copies_block() {
        let t = Tensor::from_vec(2, 4, (0..8).map(|v| v as f64).collect());
        let s = t.slice_cols(1, 2);
        assert_eq!(s.data(), &[1.0, 2.0, 5.0, 6.0]);
    }
}
