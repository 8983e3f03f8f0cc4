use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

/// Cholesky factorization with a single bounded rescue: on failure
/// `1e-10 * tr(M) / dim * I` is added once, then the error is final.
pub(crate) fn cholesky_jittered(m: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let dim = m.nrows();
    if dim == 0 {
        return Ok(Cholesky::new(m).expect("empty matrix factorizes"));
    }
    let trace = m.trace();
    match Cholesky::new(m.clone()) {
        Some(c) => Ok(c),
        None => {
            let jitter = 1e-10 * trace.abs() / dim as f64;
            let mut shifted = m;
            for i in 0..dim {
                shifted[(i, i)] += jitter;
            }
            Cholesky::new(shifted).ok_or_else(|| {
                Error::NumericalFailure(format!("{what} is not positive definite"))
            })
        }
    }
}

pub(crate) fn chol_log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Diagonal `n x n` blocks of `(L L^T)^-1` for lower-triangular `L`, from
/// the block columns of `L^-1` built by block forward substitution.
pub(crate) fn inverse_diagonal_blocks(l: &DMatrix<f64>, n: usize) -> Option<Vec<DMatrix<f64>>> {
    let p = l.nrows() / n;
    let mut dinv = Vec::with_capacity(p);
    for a in 0..p {
        let mut x = DMatrix::identity(n, n);
        if !l.view((a * n, a * n), (n, n)).solve_lower_triangular_mut(&mut x) {
            return None;
        }
        dinv.push(x);
    }
    let mut out = Vec::with_capacity(p);
    for b in 0..p {
        // X_ab for a >= b, with L_aa X_ab = -sum_{c<a} L_ac X_cb
        let mut col: Vec<DMatrix<f64>> = vec![dinv[b].clone()];
        let mut acc = DMatrix::zeros(n, n);
        for a in b + 1..p {
            acc.fill(0.0);
            for c in b..a {
                acc.gemm(1.0, &l.view((a * n, c * n), (n, n)), &col[c - b], 1.0);
            }
            col.push(-(&dinv[a] * &acc));
        }
        let mut block = DMatrix::zeros(n, n);
        for x in &col {
            block.gemm_tr(1.0, x, x, 1.0);
        }
        symmetrize(&mut block);
        out.push(block);
    }
    Some(out)
}
