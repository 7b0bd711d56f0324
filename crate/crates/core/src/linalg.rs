//! Dense row-major matrices and the handful of vector ops the model needs.
//!
//! Everything accumulates left-to-right in index order; no reordering, no
//! fused operations. Bit-exact repeatability across runs is a contract here,
//! so keep any future optimization behind the same summation order.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// y = x · M for a row vector x of length `rows`; y has length `cols`.
    pub fn vecmat(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            let row = self.row(r);
            for (c, &m) in row.iter().enumerate() {
                y[c] += xr * m;
            }
        }
        y
    }

    /// x = M · y for a column vector y of length `cols`; x has length `rows`.
    /// This is the adjoint of `vecmat` and is what backprop uses.
    pub fn matvec(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.cols);
        let mut x = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for (c, &m) in row.iter().enumerate() {
                acc += m * y[c];
            }
            x[r] = acc;
        }
        x
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest singular value by power iteration on MᵀM.
    ///
    /// `tol` is the relative change in the eigenvalue estimate between
    /// iterations at which we stop.
    pub fn spectral_norm(&self, tol: f64, max_iters: usize) -> f64 {
        if self.rows == 0 || self.cols == 0 {
            return 0.0;
        }
        let n = self.cols;
        let mut v = vec![1.0 / (n as f64).sqrt(); n];
        let mut eig_old = 0.0;
        for _ in 0..max_iters {
            // w = Mᵀ (M v)
            let mv = self.matvec_t(&v);
            let w = self.vecmat(&mv);
            let eig: f64 = w.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            let norm = l2_norm(&w);
            if norm == 0.0 {
                return 0.0;
            }
            for (vi, wi) in v.iter_mut().zip(w.iter()) {
                *vi = wi / norm;
            }
            if eig > 0.0 && ((eig - eig_old).abs() <= tol * eig.abs()) {
                return eig.max(0.0).sqrt();
            }
            eig_old = eig;
        }
        eig_old.max(0.0).sqrt()
    }

    /// t = M · v interpreted with v indexed by cols: returns length-`rows`
    /// vector t[r] = Σ_c M[r,c] v[c]. Same as `matvec`; kept for symmetry in
    /// the power iteration where the operand order reads M v then Mᵀ(...).
    fn matvec_t(&self, v: &[f64]) -> Vec<f64> {
        self.matvec(v)
    }
}

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn sub_l2_norm(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Numerically stable log(Σ exp(x_i)).
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = x.iter().map(|v| (v - m).exp()).sum();
    m + sum.ln()
}
