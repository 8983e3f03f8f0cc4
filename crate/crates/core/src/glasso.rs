//! Group-Lasso baselines: one group per module of a MISO problem.
//!
//! Plain:  `min 1/2 ||y - A theta||^2 + delta sum_i ||theta_i||`.
//! Kernel: `min 1/2 ||y - A theta||^2 + delta sum_i sqrt(theta_i^T Kbar(beta)^-1 theta_i)`,
//! solved as a plain group Lasso in `phi_i = F^-1 theta_i`, `F F^T = Kbar(beta)`.
//!
//! Both are solved by cyclic block coordinate descent with an exact
//! minimization per block, so inactive blocks are exact zeros.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{self, TcFactor};
use crate::linalg::symmetrize;
use crate::model::Topology;
use crate::predictor::{MisoProblem, ThetaVector};

/// Default kernel shape; the value reported to work best on the benchmark.
pub const DEFAULT_BETA: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlassoConfig {
    pub delta: f64,
    /// Shared kernel shape of all modules; used by the kernel variant only.
    pub beta: f64,
    /// Stop when every block moves by less than `tol * max(1, |theta|_inf)`.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Solve on data rescaled to unit RMS regressors and output, so a fixed
    /// `delta` grid means the same across data sets; `theta` is mapped back.
    pub standardize: bool,
}

impl Default for GlassoConfig {
    fn default() -> Self {
        Self {
            delta: 0.0,
            beta: DEFAULT_BETA,
            tol: 1e-10,
            max_sweeps: 20_000,
            standardize: false,
        }
    }
}

impl GlassoConfig {
    fn validate(&self, kernel: bool) -> Result<()> {
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::Domain(format!("delta = {} must be >= 0", self.delta)));
        }
        if kernel && !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Domain(format!("beta = {} outside (0, 1)", self.beta)));
        }
        if !(self.tol > 0.0) || self.max_sweeps == 0 {
            return Err(Error::Config("tolerance and sweep budget must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlassoMethod {
    Plain,
    Kernel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlassoFit {
    /// Coefficients of all `L` modules on the original data scale.
    pub theta: ThetaVector,
    pub converged: bool,
    pub sweeps: usize,
    /// Objective on the scale the problem was solved on.
    pub objective: f64,
    pub config: GlassoConfig,
    pub method: GlassoMethod,
}

/// Quadratic data of a group Lasso in the solver's coordinates.
struct Groups {
    order: usize,
    gram: DMatrix<f64>,
    aty: DVector<f64>,
    yty: f64,
    eig: Vec<SymmetricEigen<f64, nalgebra::Dyn>>,
}

impl Groups {
    fn new(order: usize, gram: DMatrix<f64>, aty: DVector<f64>, yty: f64) -> Self {
        let blocks = gram.nrows() / order;
        let eig = (0..blocks)
            .map(|i| {
                let g = gram.view((i * order, i * order), (order, order)).into_owned();
                SymmetricEigen::new(g)
            })
            .collect();
        Self {
            order,
            gram,
            aty,
            yty,
            eig,
        }
    }

    fn blocks(&self) -> usize {
        self.gram.nrows() / self.order
    }

    fn objective(&self, x: &DVector<f64>, delta: f64) -> f64 {
        let n = self.order;
        let quad = 0.5 * (self.yty - 2.0 * x.dot(&self.aty) + x.dot(&(&self.gram * x)));
        let pen: f64 = (0..self.blocks()).map(|i| x.rows(i * n, n).norm()).sum();
        quad.max(0.0) + delta * pen
    }
}

/// Scalings `(a, s)` with `A' = A / a`, `y' = y / s`.
fn scales(problem: &MisoProblem) -> (f64, f64) {
    let entries = (problem.samples() * problem.regressors().ncols()) as f64;
    let a = (problem.gram().trace() / entries).sqrt();
    let s = (problem.yty() / problem.samples() as f64).sqrt();
    let guard = |v: f64| if v > 0.0 && v.is_finite() { v } else { 1.0 };
    (guard(a), guard(s))
}

/// The per-module factor `F` of the kernel variant.
trait BlockFactor {
    fn tr_mul(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
    fn tr_mul_vec(&self, x: &DVector<f64>) -> DVector<f64>;
}

impl BlockFactor for TcFactor {
    fn tr_mul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        TcFactor::tr_mul(self, x)
    }

    fn tr_mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        TcFactor::tr_mul_vec(self, x)
    }
}

/// Solver coordinates: scaled, and for the kernel variant `phi = F^-1 theta`
/// with the same factor `F` for every module.
fn transformed(problem: &MisoProblem, factor: Option<&dyn BlockFactor>, standardize: bool) -> (Groups, f64) {
    let (a, s) = if standardize { scales(problem) } else { (1.0, 1.0) };
    let n = problem.order();
    let mut gram = problem.gram() / (a * a);
    let mut aty = problem.aty() / (a * s);
    let yty = problem.yty() / (s * s);
    if let Some(f) = factor {
        let blocks = problem.nodes();
        let raw = gram.clone();
        for i in 0..blocks {
            for k in 0..blocks {
                // F^T G_ik F = F^T (F^T G_ki)^T
                let g = raw.view((k * n, i * n), (n, n)).into_owned();
                let block = f.tr_mul(&f.tr_mul(&g).transpose());
                gram.view_mut((i * n, k * n), (n, n)).copy_from(&block);
            }
        }
        for i in 0..blocks {
            let v = aty.rows(i * n, n).into_owned();
            aty.rows_mut(i * n, n).copy_from(&f.tr_mul_vec(&v));
        }
        symmetrize(&mut gram);
    }
    (Groups::new(n, gram, aty, yty), s / a)
}

/// Minimizes `1/2 x^T G x - c^T x + delta ||x||` given `G = Q diag(ev) Q^T`.
fn block_minimizer(eig: &SymmetricEigen<f64, nalgebra::Dyn>, c: &DVector<f64>, delta: f64) -> DVector<f64> {
    let cn = c.norm();
    if cn <= delta {
        return DVector::zeros(c.len());
    }
    let ct = eig.eigenvectors.tr_mul(c);
    let ev: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    // phi(nu) = nu |(G + nu I)^-1 c| rises from ~0 to |c| > delta
    let norm_at = |nu: f64| -> (f64, f64) {
        let mut s = 0.0;
        let mut ds = 0.0;
        for (k, &e) in ev.iter().enumerate() {
            let d = e + nu;
            let q = ct[k] * ct[k];
            s += q / (d * d);
            ds -= 2.0 * q / (d * d * d);
        }
        (s, ds)
    };
    let top = ev.iter().copied().fold(0.0, f64::max);
    let mut lo = 0.0;
    let mut hi = top * delta / (cn - delta) + delta;
    let mut nu = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (s, ds) = norm_at(nu);
        let root = s.sqrt();
        let g = nu * root - delta;
        if g > 0.0 {
            hi = nu;
        } else {
            lo = nu;
        }
        if g.abs() <= 1e-15 * delta.max(f64::MIN_POSITIVE) || hi - lo <= 1e-15 * hi {
            break;
        }
        let dg = root + nu * ds / (2.0 * root);
        let newton = nu - g / dg;
        nu = if dg > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    let scaled = DVector::from_fn(ct.len(), |k, _| ct[k] / (ev[k] + nu));
    &eig.eigenvectors * scaled
}

struct Solution {
    x: DVector<f64>,
    converged: bool,
    sweeps: usize,
}

fn solve_groups(groups: &Groups, delta: f64, start: DVector<f64>, tol: f64, max_sweeps: usize) -> Solution {
    let n = groups.order;
    let blocks = groups.blocks();
    let mut x = start;
    if delta == 0.0 {
        let pinv = groups
            .gram
            .clone()
            .pseudo_inverse(1e-12 * groups.gram.amax().max(f64::MIN_POSITIVE))
            .expect("non-negative tolerance");
        return Solution {
            x: pinv * &groups.aty,
            converged: true,
            sweeps: 0,
        };
    }
    // residual correlation aty - G x
    let mut corr = &groups.aty - &groups.gram * &x;
    for sweep in 1..=max_sweeps {
        let mut largest: f64 = 0.0;
        for i in 0..blocks {
            let old = x.rows(i * n, n).into_owned();
            let c = corr.rows(i * n, n) + groups.gram.view((i * n, i * n), (n, n)) * &old;
            let new = block_minimizer(&groups.eig[i], &c, delta);
            let step = &new - &old;
            let moved = step.amax();
            if moved > 0.0 {
                corr -= groups.gram.columns(i * n, n) * &step;
                x.rows_mut(i * n, n).copy_from(&new);
            }
            largest = largest.max(moved);
        }
        if largest <= tol * x.amax().max(1.0) {
            return Solution {
                x,
                converged: true,
                sweeps: sweep,
            };
        }
    }
    Solution {
        x,
        converged: false,
        sweeps: max_sweeps,
    }
}

/// A problem mapped to solver coordinates for one `(beta, standardize)`.
struct Prepared {
    groups: Groups,
    factor: Option<TcFactor>,
    ratio: f64,
    target: usize,
    nodes: usize,
}

impl Prepared {
    fn new(problem: &MisoProblem, beta: f64, method: GlassoMethod, standardize: bool) -> Self {
        let factor = (method == GlassoMethod::Kernel).then(|| TcFactor::new(beta, 1.0));
        let (groups, ratio) = transformed(problem, factor.as_ref().map(|f| f as &dyn BlockFactor), standardize);
        Self {
            groups,
            factor,
            ratio,
            target: problem.target(),
            nodes: problem.nodes(),
        }
    }

    /// `theta = ratio * F phi`, inverted.
    fn to_solver(&self, theta: &ThetaVector) -> Result<DVector<f64>> {
        let n = self.groups.order;
        if theta.coeffs.len() != n * self.nodes {
            return Err(Error::InvalidInput("warm start has the wrong length".into()));
        }
        let mut x = DVector::zeros(theta.coeffs.len());
        for i in 0..self.nodes {
            let t = theta.coeffs.rows(i * n, n) / self.ratio;
            let phi = match &self.factor {
                Some(f) => f
                    .dense(n)
                    .solve_lower_triangular(&t)
                    .ok_or_else(|| Error::NumericalFailure("kernel factor is singular".into()))?,
                None => t,
            };
            x.rows_mut(i * n, n).copy_from(&phi);
        }
        Ok(x)
    }

    fn to_theta(&self, x: &DVector<f64>) -> Result<ThetaVector> {
        let n = self.groups.order;
        let mut coeffs = DVector::zeros(x.len());
        for i in 0..self.nodes {
            let phi = x.rows(i * n, n).into_owned();
            let t = match &self.factor {
                Some(f) => f.mul_vec(&phi),
                None => phi,
            };
            coeffs.rows_mut(i * n, n).copy_from(&(t * self.ratio));
        }
        if coeffs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure("group Lasso produced non-finite coefficients".into()));
        }
        Ok(ThetaVector {
            target: self.target,
            order: n,
            modules: (0..self.nodes).collect(),
            coeffs,
        })
    }

    fn solve(&self, cfg: &GlassoConfig, method: GlassoMethod, start: Option<DVector<f64>>) -> Result<(GlassoFit, DVector<f64>)> {
        let start = start.unwrap_or_else(|| DVector::zeros(self.groups.order * self.nodes));
        let sol = solve_groups(&self.groups, cfg.delta, start, cfg.tol, cfg.max_sweeps);
        let fit = GlassoFit {
            theta: self.to_theta(&sol.x)?,
            converged: sol.converged,
            sweeps: sol.sweeps,
            objective: self.groups.objective(&sol.x, cfg.delta),
            config: *cfg,
            method,
        };
        Ok((fit, sol.x))
    }
}

fn fit(
    problem: &MisoProblem,
    cfg: &GlassoConfig,
    method: GlassoMethod,
    warm: Option<&ThetaVector>,
) -> Result<GlassoFit> {
    cfg.validate(method == GlassoMethod::Kernel)?;
    let prepared = Prepared::new(problem, cfg.beta, method, cfg.standardize);
    let start = warm.map(|w| prepared.to_solver(w)).transpose()?;
    Ok(prepared.solve(cfg, method, start)?.0)
}

pub fn glasso_fit(problem: &MisoProblem, cfg: &GlassoConfig) -> Result<GlassoFit> {
    fit(problem, cfg, GlassoMethod::Plain, None)
}

pub fn kernel_glasso_fit(problem: &MisoProblem, cfg: &GlassoConfig) -> Result<GlassoFit> {
    fit(problem, cfg, GlassoMethod::Kernel, None)
}

/// Either variant, started from `warm` (coefficients on the original scale).
pub fn fit_warm(
    problem: &MisoProblem,
    cfg: &GlassoConfig,
    method: GlassoMethod,
    warm: Option<&ThetaVector>,
) -> Result<GlassoFit> {
    fit(problem, cfg, method, warm)
}

/// Largest violation of the block optimality conditions of `fit`, on the
/// scale the problem was solved on: `max(0, |g_i| - delta)` for zero blocks
/// and `|g_i - delta x_i / |x_i||` for the others, where `g_i` is the
/// block's residual correlation in solver coordinates.
pub fn kkt_residual(problem: &MisoProblem, fit: &GlassoFit) -> f64 {
    let cfg = &fit.config;
    let n = problem.order();
    let prepared = Prepared::new(problem, cfg.beta, fit.method, cfg.standardize);
    let x = prepared.to_solver(&fit.theta).expect("coefficients match the problem");
    let groups = &prepared.groups;
    let corr = &groups.aty - &groups.gram * &x;
    (0..groups.blocks())
        .map(|i| {
            let g = corr.rows(i * n, n);
            let xi = x.rows(i * n, n);
            let norm = xi.norm();
            if norm == 0.0 {
                (g.norm() - cfg.delta).max(0.0)
            } else {
                (g - xi * (cfg.delta / norm)).norm()
            }
        })
        .fold(0.0, f64::max)
}

/// Penalty `sum_i sqrt(theta_i^T Kbar(beta)^-1 theta_i)` evaluated directly.
pub fn kernel_penalty(theta: &ThetaVector, beta: f64) -> f64 {
    let n = theta.order;
    let inv = kernel::tc_inverse(n, beta, 1.0);
    (0..theta.modules.len())
        .map(|i| {
            let t = theta.coeffs.rows(i * n, n);
            t.dot(&(&inv * t)).max(0.0).sqrt()
        })
        .sum()
}

/// Predictor topology holding `source -> target` for every block with
/// norm above `eps`.
pub fn topology_from_theta(theta: &ThetaVector, nodes: usize, eps: f64) -> Topology {
    let mut g = Topology::predictor(nodes);
    for (source, norm) in theta.block_norms() {
        if norm > eps {
            g.insert(source, theta.target).expect("module within range");
        }
    }
    g
}

pub const SUPPORT_EPS: f64 = 1e-8;

/// How the data are split into a training and a validation segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitRule {
    /// Training on the first `floor(2 (N + 1) / 3)` samples.
    TwoThirds,
    /// Training on the first `k` samples.
    Fixed(usize),
}

impl SplitRule {
    pub fn training_len(&self, samples: usize) -> usize {
        match *self {
            SplitRule::TwoThirds => 2 * (samples + 1) / 3,
            SplitRule::Fixed(k) => k,
        }
    }
}

/// One grid point of a cross-validation run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvPoint {
    pub delta: f64,
    pub beta: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub config: GlassoConfig,
    pub points: Vec<CvPoint>,
}

/// Chooses `(delta, beta)` by one-step prediction error on the validation
/// segment. Validation regressors keep the samples of the training segment,
/// so predictions of the first validation rows use the measured history.
/// Ties go to the first grid point in `(beta, delta)` grid order.
pub fn cross_validate(
    problem: &MisoProblem,
    method: GlassoMethod,
    delta_grid: &[f64],
    beta_grid: &[f64],
    split: SplitRule,
    base: &GlassoConfig,
) -> Result<CvResult> {
    if delta_grid.is_empty() || (method == GlassoMethod::Kernel && beta_grid.is_empty()) {
        return Err(Error::Config("cross-validation grids must be non-empty".into()));
    }
    let samples = problem.samples();
    let train_len = split.training_len(samples);
    if train_len == 0 || train_len >= samples {
        return Err(Error::Config(format!(
            "split leaves no training or validation samples ({train_len} of {samples})"
        )));
    }
    let train = problem.rows(0..train_len)?;
    let valid = problem.rows(train_len..samples)?;
    let betas: Vec<f64> = match method {
        GlassoMethod::Plain => vec![base.beta],
        GlassoMethod::Kernel => beta_grid.to_vec(),
    };
    // path from the largest delta down, warm-started
    let mut order: Vec<usize> = (0..delta_grid.len()).collect();
    order.sort_by(|&a, &b| delta_grid[b].total_cmp(&delta_grid[a]));
    let mut points = Vec::with_capacity(betas.len() * delta_grid.len());
    let mut best: Option<(f64, usize)> = None;
    for &beta in &betas {
        let mut rmse = vec![0.0; delta_grid.len()];
        let prepared = Prepared::new(&train, beta, method, base.standardize);
        let mut warm: Option<DVector<f64>> = None;
        for &k in &order {
            let cfg = GlassoConfig {
                delta: delta_grid[k],
                beta,
                ..*base
            };
            cfg.validate(method == GlassoMethod::Kernel)?;
            let (f, x) = prepared.solve(&cfg, method, warm.take())?;
            let residual = valid.y() - f.theta.predict(&valid);
            rmse[k] = (residual.norm_squared() / valid.samples() as f64).sqrt();
            warm = Some(x);
        }
        for (k, &r) in rmse.iter().enumerate() {
            let idx = points.len();
            points.push(CvPoint {
                delta: delta_grid[k],
                beta,
                rmse: r,
            });
            if best.is_none_or(|(b, _)| r < b) {
                best = Some((r, idx));
            }
        }
    }
    let (_, idx) = best.expect("non-empty grid");
    Ok(CvResult {
        config: GlassoConfig {
            delta: points[idx].delta,
            beta: points[idx].beta,
            ..*base
        },
        points,
    })
}

/// `delta` grid `{0, step, ..., max}`.
pub fn delta_grid(max: f64, step: f64) -> Vec<f64> {
    let count = (max / step).round() as usize;
    (0..=count).map(|k| k as f64 * step).collect()
}

/// `beta` grid `{0.1, ..., 0.9}`.
pub fn beta_grid() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

/// Fits along `deltas` (descending, warm-started) and writes one CSV row
/// per `(delta, source)` with the block norm.
pub fn write_path_csv<W: Write>(
    problem: &MisoProblem,
    method: GlassoMethod,
    deltas: &[f64],
    base: &GlassoConfig,
    out: W,
) -> Result<()> {
    let mut sorted = deltas.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["delta", "beta", "source", "norm"])?;
    let mut warm: Option<ThetaVector> = None;
    for delta in sorted {
        let cfg = GlassoConfig { delta, ..*base };
        let f = fit(problem, &cfg, method, warm.as_ref())?;
        for (source, norm) in f.theta.block_norms() {
            w.write_record([
                format!("{delta:e}"),
                format!("{:e}", cfg.beta),
                (source + 1).to_string(),
                format!("{norm:e}"),
            ])?;
        }
        warm = Some(f.theta);
    }
    w.flush()?;
    Ok(())
}
