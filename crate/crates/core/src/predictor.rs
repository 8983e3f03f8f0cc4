//! Per-node regression form of the one-step-ahead predictor.
//!
//! Node `j` becomes `y = sum_i A_ji theta_ji + e` with `y = w_j(1..N)` and
//! `A_ji[t, k] = w_i(t - k)`, `k = 1..n`, samples before `t = 1` taken as
//! zero. The block `i = j` carries the noise-whitening part `1 - H_j^-1`.

use std::ops::Range;

use nalgebra::{DMatrix, DMatrixView, DVector};

use crate::error::{Error, Result};
use crate::model::{DataSet, Topology};

#[derive(Debug, Clone, PartialEq)]
pub struct MisoProblem {
    target: usize,
    order: usize,
    nodes: usize,
    y: DVector<f64>,
    /// `[A_j0, ..., A_j(L-1)]`, each block `N x n`.
    regressors: DMatrix<f64>,
    gram: DMatrix<f64>,
    aty: DVector<f64>,
    yty: f64,
}

/// Builds the MISO problem of node `target` with FIR truncation `order`.
pub fn build_miso(data: &DataSet, target: usize, order: usize) -> Result<MisoProblem> {
    let nodes = data.nodes();
    if target >= nodes {
        return Err(Error::InvalidInput(format!(
            "target {target} outside {nodes} nodes"
        )));
    }
    if order == 0 {
        return Err(Error::InvalidInput("FIR order must be >= 1".into()));
    }
    let w = data.w();
    let samples = data.samples();
    let regressors = DMatrix::from_fn(samples, nodes * order, |t, col| {
        let (source, k) = (col / order, col % order + 1);
        if t >= k {
            w[(t - k, source)]
        } else {
            0.0
        }
    });
    let y = w.column(target).into_owned();
    Ok(MisoProblem::from_parts(target, order, nodes, y, regressors))
}

impl MisoProblem {
    fn from_parts(
        target: usize,
        order: usize,
        nodes: usize,
        y: DVector<f64>,
        regressors: DMatrix<f64>,
    ) -> Self {
        let gram = regressors.tr_mul(&regressors);
        let aty = regressors.tr_mul(&y);
        let yty = y.dot(&y);
        Self {
            target,
            order,
            nodes,
            y,
            regressors,
            gram,
            aty,
            yty,
        }
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn samples(&self) -> usize {
        self.y.len()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    /// Full regressor `A_j` (`N x nL`).
    pub fn regressors(&self) -> &DMatrix<f64> {
        &self.regressors
    }

    pub fn block(&self, source: usize) -> DMatrixView<'_, f64> {
        self.regressors
            .columns(source * self.order, self.order)
    }

    /// `A_j^T A_j`.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn gram_block(&self, a: usize, b: usize) -> DMatrixView<'_, f64> {
        let n = self.order;
        self.gram.view((a * n, b * n), (n, n))
    }

    /// `A_j^T y`.
    pub fn aty(&self) -> &DVector<f64> {
        &self.aty
    }

    pub fn yty(&self) -> f64 {
        self.yty
    }

    /// Sources of the edges of `g` entering this problem's target, ascending.
    pub fn modules_of(&self, g: &Topology) -> Result<Vec<usize>> {
        let modules = g.sources_of(self.target);
        if let Some(&bad) = modules.iter().find(|&&s| s >= self.nodes) {
            return Err(Error::InvalidInput(format!(
                "module {bad} outside {} nodes",
                self.nodes
            )));
        }
        Ok(modules)
    }

    /// Stacks `[A_ji1, ..., A_jip]` for the edges of `g` entering the
    /// target, in ascending source order.
    pub fn restrict(&self, g: &Topology) -> Result<(DMatrix<f64>, Vec<usize>)> {
        let modules = self.modules_of(g)?;
        Ok((self.restrict_modules(&modules), modules))
    }

    pub fn restrict_modules(&self, modules: &[usize]) -> DMatrix<f64> {
        let n = self.order;
        let mut out = DMatrix::zeros(self.samples(), n * modules.len());
        for (slot, &i) in modules.iter().enumerate() {
            out.columns_mut(slot * n, n).copy_from(&self.block(i));
        }
        out
    }

    pub(crate) fn sub_gram(&self, modules: &[usize]) -> DMatrix<f64> {
        let n = self.order;
        let mut out = DMatrix::zeros(n * modules.len(), n * modules.len());
        for (a, &i) in modules.iter().enumerate() {
            for (b, &k) in modules.iter().enumerate() {
                out.view_mut((a * n, b * n), (n, n))
                    .copy_from(&self.gram_block(i, k));
            }
        }
        out
    }

    /// The sub-problem on regression rows `range` (sample times
    /// `range.start + 1 ..= range.end`). Regressors keep the values of the
    /// full data set, so later rows still see earlier samples.
    pub fn rows(&self, range: Range<usize>) -> Result<MisoProblem> {
        if range.start >= range.end || range.end > self.samples() {
            return Err(Error::InvalidInput(format!(
                "row range {range:?} invalid for {} samples",
                self.samples()
            )));
        }
        let len = range.end - range.start;
        let y = self.y.rows(range.start, len).into_owned();
        let regressors = self.regressors.rows(range.start, len).into_owned();
        Ok(Self::from_parts(
            self.target,
            self.order,
            self.nodes,
            y,
            regressors,
        ))
    }
}

/// Stacked per-module coefficient vectors for one target node.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector {
    pub target: usize,
    pub order: usize,
    pub modules: Vec<usize>,
    pub coeffs: DVector<f64>,
}

impl ThetaVector {
    pub fn zeros(target: usize, order: usize, modules: Vec<usize>) -> Self {
        let len = order * modules.len();
        Self {
            target,
            order,
            modules,
            coeffs: DVector::zeros(len),
        }
    }

    /// Coefficients of the module fed by `source`, if it is part of the vector.
    pub fn block(&self, source: usize) -> Option<DVector<f64>> {
        let slot = self.modules.iter().position(|&m| m == source)?;
        Some(self.coeffs.rows(slot * self.order, self.order).into_owned())
    }

    pub fn block_norms(&self) -> Vec<(usize, f64)> {
        self.modules
            .iter()
            .enumerate()
            .map(|(slot, &m)| (m, self.coeffs.rows(slot * self.order, self.order).norm()))
            .collect()
    }

    /// `A_j|G theta` on the rows of `problem`.
    pub fn predict(&self, problem: &MisoProblem) -> DVector<f64> {
        problem.restrict_modules(&self.modules) * &self.coeffs
    }
}
