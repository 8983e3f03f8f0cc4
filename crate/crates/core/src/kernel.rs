//! TC ("tuned/correlated") kernel blocks `lambda * Kbar(beta)` with
//! `Kbar(beta)[k, q] = beta^max(k, q)` (1-based indices).
//!
//! The kernel is the covariance of a reversed random walk
//! `x_k = sum_{l >= k} u_l` with independent increments of variance
//! `d_l = beta^l (1 - beta)` (`l < n`) and `d_n = beta^n`, i.e.
//! `Kbar = U D U^T` with `U` the all-ones upper triangle. This gives a
//! tridiagonal inverse, a closed-form log-determinant and a closed-form
//! lower Cholesky factor.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Lower end of the admissible `beta` range used by the hyperparameter search.
pub const BETA_MIN: f64 = 1e-6;
/// Upper end of the admissible `beta` range used by the hyperparameter search.
pub const BETA_MAX: f64 = 0.999;
/// Floor applied to `lambda` wherever the scaled kernel is inverted.
pub const LAMBDA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelBlock {
    pub order: usize,
    pub beta: f64,
    pub lambda: f64,
}

impl KernelBlock {
    pub fn new(order: usize, beta: f64, lambda: f64) -> Result<Self> {
        let block = Self {
            order,
            beta,
            lambda,
        };
        block.validate()?;
        Ok(block)
    }

    fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(Error::Domain("kernel order must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Domain(format!("beta = {} outside [0, 1)", self.beta)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Domain(format!("lambda = {} must be > 0", self.lambda)));
        }
        Ok(())
    }
}

/// Dense `lambda * Kbar(beta)`.
pub fn materialize(block: &KernelBlock) -> Result<DMatrix<f64>> {
    block.validate()?;
    Ok(tc_matrix(block.order, block.beta, block.lambda))
}

pub(crate) fn tc_matrix(n: usize, beta: f64, lambda: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |k, q| lambda * beta.powi((k.max(q) + 1) as i32))
}

/// Lower-triangular `F` with `F F^T = lambda * Kbar(beta)`.
pub fn factor(block: &KernelBlock) -> Result<DMatrix<f64>> {
    block.validate()?;
    if block.beta == 0.0 {
        return Err(Error::SingularKernel);
    }
    Ok(tc_factor(block.order, block.beta, block.lambda))
}

/// Closed-form Cholesky factor:
/// `F[k, 0] = beta^(k + 1/2)`, `F[k, j] = beta^(k - (j - 1)/2) sqrt(1 - beta)`
/// for `1 <= j <= k` (0-based), times `sqrt(lambda)`. Entries underflow to
/// zero gracefully for tiny `beta`.
pub(crate) fn tc_factor(n: usize, beta: f64, lambda: f64) -> DMatrix<f64> {
    let scale = lambda.sqrt();
    let tail = (1.0 - beta).sqrt();
    DMatrix::from_fn(n, n, |k, j| {
        if j > k {
            0.0
        } else if j == 0 {
            scale * beta.powf(k as f64 + 0.5)
        } else {
            scale * tail * beta.powf(k as f64 - (j as f64 - 1.0) / 2.0)
        }
    })
}

/// Implicit form of [`tc_factor`]. Products cost `O(n)` per column instead
/// of `O(n^2)`, using `F[k, j] = beta^(k - j) d_j` for `j <= k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct TcFactor {
    pub beta: f64,
    pub lambda: f64,
}

impl TcFactor {
    pub fn new(beta: f64, lambda: f64) -> Self {
        Self { beta, lambda }
    }

    /// `d_j = F[j, j]`.
    fn diag(&self, n: usize) -> Vec<f64> {
        let scale = self.lambda.sqrt();
        let tail = (1.0 - self.beta).sqrt();
        (0..n)
            .map(|j| {
                if j == 0 {
                    scale * self.beta.sqrt()
                } else {
                    scale * tail * self.beta.powf((j as f64 + 1.0) / 2.0)
                }
            })
            .collect()
    }

    /// `F^T x`.
    pub fn tr_mul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = x.nrows();
        let d = self.diag(n);
        let mut out = x.clone();
        for mut col in out.column_iter_mut() {
            let mut acc = 0.0;
            for k in (0..n).rev() {
                acc = col[k] + self.beta * acc;
                col[k] = d[k] * acc;
            }
        }
        out
    }

    /// `F x`.
    pub fn mul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = x.nrows();
        let d = self.diag(n);
        let mut out = x.clone();
        for mut col in out.column_iter_mut() {
            let mut acc = 0.0;
            for k in 0..n {
                acc = self.beta * acc + d[k] * col[k];
                col[k] = acc;
            }
        }
        out
    }

    /// `F^T x` for a vector.
    pub fn tr_mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = self.tr_mul(&DMatrix::from_column_slice(x.len(), 1, x.as_slice()));
        DVector::from_column_slice(m.as_slice())
    }

    /// `F x` for a vector.
    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = self.mul(&DMatrix::from_column_slice(x.len(), 1, x.as_slice()));
        DVector::from_column_slice(m.as_slice())
    }

    pub fn dense(&self, n: usize) -> DMatrix<f64> {
        tc_factor(n, self.beta, self.lambda)
    }
}

/// `log det Kbar(beta) = n(n+1)/2 log beta + (n-1) log(1 - beta)`.
pub fn tc_log_det(n: usize, beta: f64) -> f64 {
    let n = n as f64;
    0.5 * n * (n + 1.0) * beta.ln() + (n - 1.0) * (1.0 - beta).ln()
}

/// Increment variances of the random-walk form, as logarithms.
fn log_increment_variance(n: usize, l: usize, beta: f64) -> f64 {
    if l + 1 < n {
        (l + 1) as f64 * beta.ln() + (1.0 - beta).ln()
    } else {
        n as f64 * beta.ln()
    }
}

/// Squared first differences `(e_l - e_{l+1})^T M (e_l - e_{l+1})` (and
/// `M[n-1, n-1]` for the last index). They do not depend on `beta`, so a
/// one-dimensional search over `beta` costs `O(n)` per evaluation.
pub fn tc_differences(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    (0..n)
        .map(|l| {
            let v = if l + 1 < n {
                m[(l, l)] - 2.0 * m[(l, l + 1)] + m[(l + 1, l + 1)]
            } else {
                m[(l, l)]
            };
            v.max(0.0)
        })
        .collect()
}

/// `log tr(Kbar(beta)^-1 M)` from the differences of `M`, by log-sum-exp.
pub fn tc_log_trace(diffs: &[f64], beta: f64) -> f64 {
    let n = diffs.len();
    let logs: Vec<f64> = diffs
        .iter()
        .enumerate()
        .filter(|(_, &q)| q > 0.0)
        .map(|(l, &q)| q.ln() - log_increment_variance(n, l, beta))
        .collect();
    let Some(peak) = logs.iter().copied().reduce(f64::max) else {
        return f64::NEG_INFINITY;
    };
    peak + logs.iter().map(|v| (v - peak).exp()).sum::<f64>().ln()
}

/// Tridiagonal `Kbar(beta)^-1 / lambda`, materialized densely.
pub(crate) fn tc_inverse(n: usize, beta: f64, lambda: f64) -> DMatrix<f64> {
    let inv_d: Vec<f64> = (0..n)
        .map(|l| (-log_increment_variance(n, l, beta)).exp() / lambda)
        .collect();
    let mut out = DMatrix::zeros(n, n);
    for a in 0..n {
        out[(a, a)] = inv_d[a] + if a > 0 { inv_d[a - 1] } else { 0.0 };
        if a + 1 < n {
            out[(a, a + 1)] = -inv_d[a];
            out[(a + 1, a)] = -inv_d[a];
        }
    }
    out
}

/// `(tr(Kbar(beta)^-1 M), log det Kbar(beta))` for the unit-scale kernel of
/// the block's order and decay; `lambda` is not involved.
pub fn inverse_quadratic(block: &KernelBlock, m: &DMatrix<f64>) -> Result<(f64, f64)> {
    if !(block.beta > 0.0 && block.beta < 1.0) {
        return Err(Error::Domain(format!("beta = {} outside (0, 1)", block.beta)));
    }
    if m.nrows() != block.order || m.ncols() != block.order {
        return Err(Error::InvalidInput(format!(
            "matrix is {}x{}, kernel order {}",
            m.nrows(),
            m.ncols(),
            block.order
        )));
    }
    let diffs = tc_differences(m);
    Ok((
        tc_log_trace(&diffs, block.beta).exp(),
        tc_log_det(block.order, block.beta),
    ))
}

/// Block-diagonal prior covariance, one block per module.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorCovariance {
    pub blocks: Vec<KernelBlock>,
}

impl PriorCovariance {
    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.order).sum()
    }

    pub fn materialize(&self) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        let mut offset = 0;
        for b in &self.blocks {
            out.view_mut((offset, offset), (b.order, b.order))
                .copy_from(&materialize(b)?);
            offset += b.order;
        }
        Ok(out)
    }

    pub fn factor(&self) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        let mut offset = 0;
        for b in &self.blocks {
            out.view_mut((offset, offset), (b.order, b.order))
                .copy_from(&factor(b)?);
            offset += b.order;
        }
        Ok(out)
    }
}
