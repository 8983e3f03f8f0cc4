//! Log-marginal-likelihood score of a predictor topology and empirical-Bayes
//! estimation of its hyperparameters.
//!
//! For a MISO problem `y = A theta + e` with `theta ~ N(0, K)`,
//! `K = blockdiag(lambda_i Kbar(beta_i))` and `e ~ N(0, sigma^2 I)`, the
//! score is `J = -y^T Gamma^-1 y - log det Gamma` with
//! `Gamma = sigma^2 I + A K A^T`, i.e. twice the log-evidence without its
//! `N log 2 pi` constant.
//!
//! Internally `theta = F phi` with `F F^T = K` (closed-form TC factors), so
//! neither `K^-1` nor an `N x N` matrix is needed on the default route:
//! with `B = A F` and `S = sigma^2 I + B^T B`,
//! `J = -(y^T y - b^T S^-1 b) / sigma^2 - (N - m) log sigma^2 - log det S`,
//! `b = B^T y`.

use std::io::Write;

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{self, TcFactor, BETA_MAX, BETA_MIN, LAMBDA_FLOOR};
use crate::linalg::{chol_log_det, cholesky_jittered, inverse_diagonal_blocks, symmetrize};
use crate::model::Topology;
use crate::predictor::MisoProblem;

/// `(sigma, {lambda_i}, {beta_i})` for one MISO problem; `modules` lists
/// the sources of the governing predictor topology in ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub sigma: f64,
    pub modules: Vec<usize>,
    pub lambda: Vec<f64>,
    pub beta: Vec<f64>,
}

impl HyperParams {
    pub fn new(sigma: f64, modules: Vec<usize>, lambda: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        let eta = Self {
            sigma,
            modules,
            lambda,
            beta,
        };
        eta.validate()?;
        Ok(eta)
    }

    /// Same `(lambda, beta)` for every module.
    pub fn uniform(sigma: f64, modules: Vec<usize>, lambda: f64, beta: f64) -> Result<Self> {
        let p = modules.len();
        Self::new(sigma, modules, vec![lambda; p], vec![beta; p])
    }

    /// EM starting point: `lambda = beta = 0.5` for every module.
    pub fn initial(sigma: f64, modules: Vec<usize>) -> Result<Self> {
        Self::uniform(sigma, modules, 0.5, 0.5)
    }

    /// Full-graph starting point for an `nodes`-node network.
    pub fn initial_full(sigma: f64, nodes: usize) -> Result<Self> {
        Self::initial(sigma, (0..nodes).collect())
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Domain(format!("sigma = {} must be > 0", self.sigma)));
        }
        if self.lambda.len() != self.modules.len() || self.beta.len() != self.modules.len() {
            return Err(Error::InvalidInput(
                "one (lambda, beta) pair per module is required".into(),
            ));
        }
        if self.modules.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("modules must be strictly ascending".into()));
        }
        for (&l, &b) in self.lambda.iter().zip(&self.beta) {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::Domain(format!("lambda = {l} must be > 0")));
            }
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Domain(format!("beta = {b} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn get(&self, module: usize) -> Option<(f64, f64)> {
        let slot = self.modules.binary_search(&module).ok()?;
        Some((self.lambda[slot], self.beta[slot]))
    }

    /// The hyperparameters of `modules`, each of which must be covered.
    pub fn for_modules(&self, modules: &[usize]) -> Result<Self> {
        let mut lambda = Vec::with_capacity(modules.len());
        let mut beta = Vec::with_capacity(modules.len());
        for &m in modules {
            let (l, b) = self.get(m).ok_or_else(|| {
                Error::InvalidInput(format!("no hyperparameters for module {m}"))
            })?;
            lambda.push(l);
            beta.push(b);
        }
        Self::new(self.sigma, modules.to_vec(), lambda, beta)
    }
}

/// Draws the initial noise level from `N(1, 0.2^2)`, redrawing until positive.
pub fn draw_initial_sigma<R: Rng>(rng: &mut R) -> f64 {
    let dist = Normal::new(1.0, 0.2).expect("valid normal");
    loop {
        let s: f64 = dist.sample(rng);
        if s > 0.0 {
            return s;
        }
    }
}

/// Keeps `sigma` and the `(lambda, beta)` pairs of the modules that are
/// sources of edges in `g` (a predictor topology of one MISO problem).
pub fn restrict_hypers(full: &HyperParams, g: &Topology) -> HyperParams {
    let mut keep: Vec<usize> = g.edges().map(|(s, _)| s).collect();
    keep.sort_unstable();
    keep.dedup();
    let mut out = HyperParams {
        sigma: full.sigma,
        modules: Vec::new(),
        lambda: Vec::new(),
        beta: Vec::new(),
    };
    for (slot, &m) in full.modules.iter().enumerate() {
        if keep.binary_search(&m).is_ok() {
            out.modules.push(m);
            out.lambda.push(full.lambda[slot]);
            out.beta.push(full.beta[slot]);
        }
    }
    out
}

/// Gaussian posterior of the stacked coefficients of the modules in `modules`.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub modules: Vec<usize>,
    pub mean: DVector<f64>,
    /// `sigma^-2 A^T A + K^-1`.
    pub precision: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
}

/// Whitened quantities `B^T B`, `B^T y` (and `B` itself when the `N x N`
/// route can be needed) for fixed hyperparameters. Scores of any subset of
/// the covered modules are read off sub-blocks without refactoring `K`.
pub struct ScoreEngine<'a> {
    problem: &'a MisoProblem,
    eta: HyperParams,
    sigma2: f64,
    factors: Vec<TcFactor>,
    bgram: DMatrix<f64>,
    bty: DVector<f64>,
    whitened: Option<DMatrix<f64>>,
}

/// `A_i F`, computed as `(F^T A_i^T)^T`.
fn whiten(problem: &MisoProblem, source: usize, factor: &TcFactor) -> DMatrix<f64> {
    factor.tr_mul(&problem.block(source).transpose()).transpose()
}

impl<'a> ScoreEngine<'a> {
    pub fn new(problem: &'a MisoProblem, eta: &HyperParams) -> Result<Self> {
        eta.validate()?;
        if let Some(&bad) = eta.modules.iter().find(|&&m| m >= problem.nodes()) {
            return Err(Error::InvalidInput(format!(
                "module {bad} outside {} nodes",
                problem.nodes()
            )));
        }
        let n = problem.order();
        let p = eta.modules.len();
        let factors: Vec<TcFactor> = eta
            .lambda
            .iter()
            .zip(&eta.beta)
            .map(|(&l, &b)| TcFactor::new(b, l))
            .collect();
        let mut bgram = DMatrix::zeros(n * p, n * p);
        for a in 0..p {
            for c in a..p {
                // F_a^T G_ac F_c = F_a^T (F_c^T G_ca)^T
                let g_ca = problem.gram_block(eta.modules[c], eta.modules[a]).into_owned();
                let block = factors[a].tr_mul(&factors[c].tr_mul(&g_ca).transpose());
                bgram.view_mut((a * n, c * n), (n, n)).copy_from(&block);
                if c != a {
                    bgram
                        .view_mut((c * n, a * n), (n, n))
                        .copy_from(&block.transpose());
                }
            }
        }
        let mut bty = DVector::zeros(n * p);
        for a in 0..p {
            let aty = problem.aty().rows(eta.modules[a] * n, n);
            bty.rows_mut(a * n, n).copy_from(&factors[a].tr_mul_vec(&aty.into_owned()));
        }
        let whitened = if problem.samples() <= n * p {
            let mut b = DMatrix::zeros(problem.samples(), n * p);
            for a in 0..p {
                b.columns_mut(a * n, n)
                    .copy_from(&whiten(problem, eta.modules[a], &factors[a]));
            }
            Some(b)
        } else {
            None
        };
        Ok(Self {
            problem,
            eta: eta.clone(),
            sigma2: eta.sigma * eta.sigma,
            factors,
            bgram,
            bty,
            whitened,
        })
    }

    pub fn hypers(&self) -> &HyperParams {
        &self.eta
    }

    fn slots(&self, modules: &[usize]) -> Result<Vec<usize>> {
        modules
            .iter()
            .map(|m| {
                self.eta.modules.binary_search(m).map_err(|_| {
                    Error::InvalidInput(format!("no hyperparameters for module {m}"))
                })
            })
            .collect()
    }

    fn columns(&self, slots: &[usize]) -> Vec<usize> {
        let n = self.problem.order();
        slots.iter().flat_map(|&s| s * n..(s + 1) * n).collect()
    }

    /// Score of the predictor topology whose target has incoming `modules`,
    /// picking the cheaper of the two algebraic routes.
    pub fn score(&self, modules: &[usize]) -> Result<f64> {
        let m = modules.len() * self.problem.order();
        if self.problem.samples() <= m {
            self.score_gamma(modules)
        } else {
            self.score_lemma(modules)
        }
    }

    /// Inversion-lemma route on the `m x m` matrix `sigma^2 I + B^T B`.
    pub fn score_lemma(&self, modules: &[usize]) -> Result<f64> {
        let cols = self.columns(&self.slots(modules)?);
        let m = cols.len();
        let mut s = DMatrix::from_fn(m, m, |a, c| self.bgram[(cols[a], cols[c])]);
        for i in 0..m {
            s[(i, i)] += self.sigma2;
        }
        let b = DVector::from_fn(m, |a, _| self.bty[cols[a]]);
        let chol = cholesky_jittered(s, "sigma^2 I + B^T B")?;
        let quad = if m > 0 {
            let z = chol.l_dirty().solve_lower_triangular(&b).ok_or_else(|| {
                Error::NumericalFailure("triangular solve failed".into())
            })?;
            z.norm_squared()
        } else {
            0.0
        };
        let samples = self.problem.samples() as f64;
        Ok(-(self.problem.yty() - quad) / self.sigma2
            - (samples - m as f64) * self.sigma2.ln()
            - chol_log_det(&chol))
    }

    /// Direct route on the `N x N` covariance `Gamma = sigma^2 I + B B^T`.
    pub fn score_gamma(&self, modules: &[usize]) -> Result<f64> {
        let cols = self.columns(&self.slots(modules)?);
        let samples = self.problem.samples();
        let mut gamma = DMatrix::identity(samples, samples) * self.sigma2;
        if !cols.is_empty() {
            let b = match &self.whitened {
                Some(w) => w.select_columns(&cols),
                None => {
                    let n = self.problem.order();
                    let slots = self.slots(modules)?;
                    let mut b = DMatrix::zeros(samples, cols.len());
                    for (k, &s) in slots.iter().enumerate() {
                        b.columns_mut(k * n, n).copy_from(&whiten(
                            self.problem,
                            self.eta.modules[s],
                            &self.factors[s],
                        ));
                    }
                    b
                }
            };
            gamma += &b * b.transpose();
        }
        let chol = cholesky_jittered(gamma, "Gamma")?;
        let z = chol
            .l_dirty()
            .solve_lower_triangular(self.problem.y())
            .ok_or_else(|| Error::NumericalFailure("triangular solve failed".into()))?;
        Ok(-z.norm_squared() - chol_log_det(&chol))
    }
}

/// `J(G_j; eta)` for the edges of `g` entering the problem's target.
pub fn score(problem: &MisoProblem, g: &Topology, eta: &HyperParams) -> Result<f64> {
    let modules = problem.modules_of(g)?;
    let engine = ScoreEngine::new(problem, &eta.for_modules(&modules)?)?;
    engine.score(&modules)
}

/// Both algebraic routes, for cross-checking: `(N x N form, lemma form)`.
pub fn score_both_forms(
    problem: &MisoProblem,
    g: &Topology,
    eta: &HyperParams,
) -> Result<(f64, f64)> {
    let modules = problem.modules_of(g)?;
    let engine = ScoreEngine::new(problem, &eta.for_modules(&modules)?)?;
    Ok((engine.score_gamma(&modules)?, engine.score_lemma(&modules)?))
}

/// Posterior quantities at the current hyperparameters needed by the
/// expectation step.
#[derive(Debug, Clone)]
pub struct EStep {
    /// Score at the hyperparameters the step was computed from.
    pub score: f64,
    /// `M = E ||y - A theta||^2` under the posterior.
    pub m_stat: f64,
    pub samples: usize,
    pub yty: f64,
    pub order: usize,
    pub modules: Vec<usize>,
    /// `n x n` diagonal blocks of `Delta = Cov + mean mean^T`, per module.
    pub delta_blocks: Vec<DMatrix<f64>>,
    pub posterior_mean: DVector<f64>,
}

struct Factorized<'a> {
    engine: ScoreEngine<'a>,
    chol: Cholesky<f64, Dyn>,
    mu: DVector<f64>,
    log_det_s: f64,
    quad: f64,
}

fn factorize<'a>(problem: &'a MisoProblem, eta: &HyperParams) -> Result<Factorized<'a>> {
    let engine = ScoreEngine::new(problem, eta)?;
    let m = engine.bgram.nrows();
    let mut s = engine.bgram.clone();
    for i in 0..m {
        s[(i, i)] += engine.sigma2;
    }
    let chol = cholesky_jittered(s, "posterior precision")?;
    let log_det_s = chol_log_det(&chol);
    let mu = chol.solve(&engine.bty);
    let quad = engine.bty.dot(&mu);
    Ok(Factorized {
        engine,
        chol,
        mu,
        log_det_s,
        quad,
    })
}

impl Factorized<'_> {
    fn s_inv(&self) -> DMatrix<f64> {
        let mut s_inv = self.chol.inverse();
        symmetrize(&mut s_inv);
        s_inv
    }

    /// Diagonal `n x n` blocks of `S^-1`.
    fn s_inv_blocks(&self) -> Result<Vec<DMatrix<f64>>> {
        let n = self.engine.problem.order();
        let l = self.chol.l();
        inverse_diagonal_blocks(&l, n)
            .ok_or_else(|| Error::NumericalFailure("triangular solve failed".into()))
    }

    fn score(&self) -> f64 {
        let samples = self.engine.problem.samples() as f64;
        let m = self.mu.len() as f64;
        let s2 = self.engine.sigma2;
        -(self.engine.problem.yty() - self.quad) / s2 - (samples - m) * s2.ln() - self.log_det_s
    }

    fn mean(&self) -> DVector<f64> {
        let n = self.engine.problem.order();
        let mut out = DVector::zeros(self.mu.len());
        for (a, f) in self.engine.factors.iter().enumerate() {
            out.rows_mut(a * n, n)
                .copy_from(&f.mul_vec(&self.mu.rows(a * n, n).into_owned()));
        }
        out
    }
}

/// Expectation step at `eta` over the modules `eta` covers.
pub fn e_step(problem: &MisoProblem, eta: &HyperParams) -> Result<EStep> {
    let fz = factorize(problem, eta)?;
    let n = problem.order();
    let m = fz.mu.len();
    let s2 = fz.engine.sigma2;
    // E||y - A theta||^2 = ||y - A mean||^2 + tr(A^T A Cov), with
    // tr(A^T A Cov) = sigma^2 tr(B^T B S^-1) = sigma^2 (m - sigma^2 tr S^-1).
    let fit = problem.yty() - 2.0 * fz.engine.bty.dot(&fz.mu)
        + fz.mu.dot(&(&fz.engine.bgram * &fz.mu));
    let s_inv = fz.s_inv_blocks()?;
    let trace: f64 = s_inv.iter().map(|b| b.trace()).sum();
    let spread = s2 * (m as f64 - s2 * trace);
    let m_stat = fit + spread;
    let delta_blocks = fz
        .engine
        .factors
        .iter()
        .enumerate()
        .map(|(a, f)| {
            let mu_a = fz.mu.rows(a * n, n);
            let inner = &s_inv[a] * s2 + mu_a * mu_a.transpose();
            let mut block = f.mul(&f.mul(&inner).transpose());
            symmetrize(&mut block);
            block
        })
        .collect();
    Ok(EStep {
        score: fz.score(),
        m_stat,
        samples: problem.samples(),
        yty: problem.yty(),
        order: n,
        modules: eta.modules.clone(),
        delta_blocks,
        posterior_mean: fz.mean(),
    })
}

/// `Q1(sigma) = -N log sigma - M / (2 sigma^2)`.
pub fn q1(sigma: f64, estep: &EStep) -> f64 {
    -(estep.samples as f64) * sigma.ln() - estep.m_stat / (2.0 * sigma * sigma)
}

/// `Q2(lambda, beta) = -1/2 log det(lambda Kbar) - 1/2 tr((lambda Kbar)^-1 Delta_i)`.
pub fn q2(lambda: f64, beta: f64, delta_block: &DMatrix<f64>) -> f64 {
    let n = delta_block.nrows();
    let diffs = kernel::tc_differences(delta_block);
    let trace = kernel::tc_log_trace(&diffs, beta).exp();
    -0.5 * (n as f64 * lambda.ln() + kernel::tc_log_det(n, beta)) - 0.5 * trace / lambda
}

/// `n log tr(Kbar(beta)^-1 Delta_i) + log det Kbar(beta)`, minimized by the
/// `beta` update.
pub fn beta_objective(diffs: &[f64], beta: f64) -> f64 {
    let n = diffs.len();
    n as f64 * kernel::tc_log_trace(diffs, beta) + kernel::tc_log_det(n, beta)
}

const BETA_GRID: usize = 20;
const BETA_TOL: f64 = 1e-4;

/// Golden-section search on `[BETA_MIN, BETA_MAX]` seeded by a 20-point grid.
pub fn minimize_beta(diffs: &[f64]) -> f64 {
    let f = |b: f64| beta_objective(diffs, b);
    let grid: Vec<f64> = (0..BETA_GRID)
        .map(|k| BETA_MIN + (BETA_MAX - BETA_MIN) * k as f64 / (BETA_GRID - 1) as f64)
        .collect();
    let values: Vec<f64> = grid.iter().map(|&b| f(b)).collect();
    let best = (0..BETA_GRID)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .expect("non-empty grid");
    let mut lo = grid[best.saturating_sub(1)];
    let mut hi = grid[(best + 1).min(BETA_GRID - 1)];
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > BETA_TOL {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = f(x2);
        }
    }
    let mid = 0.5 * (lo + hi);
    [(mid, f(mid)), (x1, f1), (x2, f2), (grid[best], values[best])]
        .into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(b, _)| b)
        .expect("candidates")
}

/// Maximization step from `estep`; `current` supplies the fallback `beta`
/// when the search does not improve on it. Returns whether `M` was clamped.
pub fn m_step(estep: &EStep, current: &HyperParams) -> Result<(HyperParams, bool)> {
    let samples = estep.samples as f64;
    let n = estep.order;
    let mut clamped = false;
    let mut m_stat = estep.m_stat;
    if !(m_stat > 0.0) {
        let floor = 1e-12 * estep.yty.max(f64::MIN_POSITIVE);
        warn!("EM: M = {m_stat:e} is not positive, clamped to {floor:e}");
        m_stat = floor;
        clamped = true;
    }
    let sigma = (m_stat / samples).sqrt();
    let mut lambda = Vec::with_capacity(estep.delta_blocks.len());
    let mut beta = Vec::with_capacity(estep.delta_blocks.len());
    for (slot, block) in estep.delta_blocks.iter().enumerate() {
        let diffs = kernel::tc_differences(block);
        let old = current.beta[slot].clamp(BETA_MIN, BETA_MAX);
        let mut b = minimize_beta(&diffs);
        if beta_objective(&diffs, b) > beta_objective(&diffs, old) {
            b = old;
        }
        let l = (kernel::tc_log_trace(&diffs, b).exp() / n as f64).max(LAMBDA_FLOOR);
        lambda.push(l);
        beta.push(b);
    }
    Ok((
        HyperParams::new(sigma, estep.modules.clone(), lambda, beta)?,
        clamped,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Stop when `|J_k - J_{k-1}| < tol (1 + |J_k|)`.
    pub tol: f64,
    /// Allowed decrease `slack (1 + |J|)` before a monotonicity error.
    pub monotone_slack: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-6,
            monotone_slack: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmTrace {
    /// `J(eta^(k))` for `k = 0, 1, ...`.
    pub values: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub m_clamped: bool,
}

impl EmTrace {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "J"])?;
        for (k, v) in self.values.iter().enumerate() {
            w.write_record([k.to_string(), format!("{v:e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Expectation-maximization on the predictor topology `g`.
pub fn em_fit(
    problem: &MisoProblem,
    g: &Topology,
    init: &HyperParams,
    opts: &EmOptions,
) -> Result<(HyperParams, EmTrace)> {
    let modules = problem.modules_of(g)?;
    em_fit_modules(problem, &init.for_modules(&modules)?, opts)
}

/// Expectation-maximization over the modules covered by `init`.
pub fn em_fit_modules(
    problem: &MisoProblem,
    init: &HyperParams,
    opts: &EmOptions,
) -> Result<(HyperParams, EmTrace)> {
    let mut eta = init.clone();
    let mut trace = EmTrace::default();
    for k in 0.. {
        let estep = e_step(problem, &eta)?;
        let j = estep.score;
        if let Some(&prev) = trace.values.last() {
            if j < prev - opts.monotone_slack * (1.0 + prev.abs()) {
                return Err(Error::MonotonicityViolation {
                    iteration: k,
                    previous: prev,
                    current: j,
                });
            }
            if (j - prev).abs() < opts.tol * (1.0 + j.abs()) {
                trace.values.push(j);
                trace.converged = true;
                break;
            }
        }
        trace.values.push(j);
        if k == opts.max_iter {
            break;
        }
        let (next, clamped) = m_step(&estep, &eta)?;
        trace.m_clamped |= clamped;
        trace.iterations += 1;
        eta = next;
    }
    Ok((eta, trace))
}

/// Gaussian posterior of the coefficients of the modules of `g`.
pub fn posterior(problem: &MisoProblem, g: &Topology, eta: &HyperParams) -> Result<Posterior> {
    let modules = problem.modules_of(g)?;
    let eta = eta.for_modules(&modules)?;
    let fz = factorize(problem, &eta)?;
    let n = problem.order();
    let m = fz.mu.len();
    let s2 = fz.engine.sigma2;
    let s_inv = fz.s_inv();
    let mut covariance = DMatrix::zeros(m, m);
    for (a, fa) in fz.engine.factors.iter().enumerate() {
        for (c, fc) in fz.engine.factors.iter().enumerate() {
            // F_a X F_c^T = F_a (F_c X^T)^T
            let x = s_inv.view((a * n, c * n), (n, n)).transpose();
            let block = fa.mul(&fc.mul(&x).transpose()) * s2;
            covariance.view_mut((a * n, c * n), (n, n)).copy_from(&block);
        }
    }
    symmetrize(&mut covariance);
    let mut precision = problem.sub_gram(&modules) / s2;
    for (a, (&l, &b)) in eta.lambda.iter().zip(&eta.beta).enumerate() {
        let inv = kernel::tc_inverse(n, b.max(BETA_MIN), l.max(LAMBDA_FLOOR));
        let mut view = precision.view_mut((a * n, a * n), (n, n));
        view += inv;
    }
    if precision.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure("posterior precision is not finite".into()));
    }
    Ok(Posterior {
        modules,
        mean: fz.mean(),
        precision,
        covariance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::tc_matrix;
    use crate::model::DataSet;
    use crate::predictor::build_miso;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_problem(samples: usize, nodes: usize, order: usize, seed: u64) -> MisoProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = DMatrix::zeros(samples, nodes);
        for t in 0..samples {
            for j in 0..nodes {
                let e: f64 = rng.sample(StandardNormal);
                let ar = if t > 0 { 0.6 * w[(t - 1, j)] } else { 0.0 };
                let cross = if t > 0 && j > 0 { 0.5 * w[(t - 1, j - 1)] } else { 0.0 };
                w[(t, j)] = ar + cross + e;
            }
        }
        build_miso(&DataSet::new(w, None).unwrap(), nodes - 1, order).unwrap()
    }

    fn dense_prior(eta: &HyperParams, order: usize) -> DMatrix<f64> {
        let p = eta.modules.len();
        let mut k = DMatrix::zeros(order * p, order * p);
        for a in 0..p {
            k.view_mut((a * order, a * order), (order, order))
                .copy_from(&tc_matrix(order, eta.beta[a], eta.lambda[a]));
        }
        k
    }

    /// -y^T Gamma^-1 y - log det Gamma with Gamma assembled from the
    /// materialized kernel and handled by LU.
    fn dense_score(problem: &MisoProblem, eta: &HyperParams) -> f64 {
        let a = problem.restrict_modules(&eta.modules);
        let k = dense_prior(eta, problem.order());
        let n = problem.samples();
        let gamma = DMatrix::identity(n, n) * eta.sigma.powi(2) + &a * k * a.transpose();
        let lu = gamma.lu();
        let x = lu.solve(problem.y()).unwrap();
        -problem.y().dot(&x) - lu.determinant().ln()
    }

    #[test]
    fn empty_restriction_reduces_to_energy() {
        let p = random_problem(30, 2, 3, 1);
        let g = Topology::predictor(2);
        let eta = HyperParams::initial_full(1.0, 2).unwrap();
        let j = score(&p, &g, &eta).unwrap();
        assert!((j + p.yty()).abs() < 1e-12 * p.yty());
    }

    #[test]
    fn zero_output_gives_negative_log_det() {
        let mut w = DMatrix::from_fn(25, 2, |t, j| ((t * 31 + j * 7) % 11) as f64 - 5.0);
        w.column_mut(1).fill(0.0);
        let p = build_miso(&DataSet::new(w, None).unwrap(), 1, 3).unwrap();
        let g = Topology::incoming(2, 1, &[0, 1]).unwrap();
        let eta = HyperParams::new(1.3, vec![0, 1], vec![0.7, 0.2], vec![0.6, 0.4]).unwrap();
        let j = score(&p, &g, &eta).unwrap();
        assert!(j <= 0.0);
        assert!((j - dense_score(&p, &eta)).abs() < 1e-9 * j.abs());
    }

    #[test]
    fn score_matches_dense_log_density() {
        let p = random_problem(30, 2, 5, 4);
        let g = Topology::incoming(2, 1, &[0, 1]).unwrap();
        let eta = HyperParams::new(0.9, vec![0, 1], vec![0.8, 1.5], vec![0.7, 0.5]).unwrap();
        let (gamma_form, lemma_form) = score_both_forms(&p, &g, &eta).unwrap();
        let oracle = dense_score(&p, &eta);
        assert!((gamma_form - oracle).abs() <= 1e-9 * oracle.abs());
        assert!((lemma_form - oracle).abs() <= 1e-9 * oracle.abs());
    }

    #[test]
    fn em_first_sigma_ignores_init_when_regressors_vanish() {
        let mut w = DMatrix::zeros(40, 2);
        for t in 0..40 {
            w[(t, 1)] = ((t * 17) % 7) as f64 - 3.0;
        }
        // node 0 is identically zero, so its block is zero; regress node 1 on node 0 only
        let p = build_miso(&DataSet::new(w, None).unwrap(), 1, 4).unwrap();
        let g = Topology::incoming(2, 1, &[0]).unwrap();
        for sigma0 in [0.3, 1.0, 4.0] {
            let init = HyperParams::initial_full(sigma0, 2).unwrap();
            let opts = EmOptions {
                max_iter: 1,
                ..EmOptions::default()
            };
            let (eta, _) = em_fit(&p, &g, &init, &opts).unwrap();
            let expected = (p.yty() / 40.0).sqrt();
            assert!((eta.sigma - expected).abs() < 1e-12 * expected);
        }
    }

    #[test]
    fn order_one_identifies_only_the_product() {
        let p = random_problem(60, 2, 1, 9);
        let g = Topology::incoming(2, 1, &[0]).unwrap();
        let eta = HyperParams::initial(1.0, vec![0]).unwrap();
        let estep = e_step(&p, &eta).unwrap();
        let d11 = estep.delta_blocks[0][(0, 0)];
        let diffs = kernel::tc_differences(&estep.delta_blocks[0]);
        let a = beta_objective(&diffs, 0.2);
        let b = beta_objective(&diffs, 0.8);
        assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
        let (next, _) = m_step(&estep, &eta).unwrap();
        assert!((next.lambda[0] * next.beta[0] - d11).abs() < 1e-10 * d11);
        let _ = g;
    }

    #[test]
    fn em_is_monotone_and_converges() {
        let p = random_problem(200, 3, 10, 12);
        let g = Topology::incoming(3, 2, &[0, 1, 2]).unwrap();
        let init = HyperParams::initial_full(1.1, 3).unwrap();
        let (eta, trace) = em_fit(&p, &g, &init, &EmOptions::default()).unwrap();
        // an irrelevant module makes lambda creep towards zero: slow but monotone
        assert_eq!(trace.values.len(), 201);
        assert!(!trace.converged);
        for w in trace.values.windows(2) {
            assert!(w[1] >= w[0] - 1e-8 * (1.0 + w[0].abs()));
        }
        assert!(eta.lambda[0] < 0.1 * eta.lambda[1]);
        let mut csv = Vec::new();
        trace.write_csv(&mut csv).unwrap();
        assert_eq!(
            String::from_utf8(csv).unwrap().lines().count(),
            trace.values.len() + 1
        );
    }

    /// Output of an FIR system whose taps are drawn from the TC prior.
    fn prior_fir_problem(samples: usize, order: usize, sigma: f64, seed: u64) -> MisoProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = tc_matrix(order, 0.8, 1.0).cholesky().unwrap().l();
        let z = DVector::from_fn(order, |_, _| rng.sample::<f64, _>(StandardNormal));
        let taps = f * z;
        let u: Vec<f64> = (0..samples).map(|_| rng.sample(StandardNormal)).collect();
        let mut w = DMatrix::zeros(samples, 2);
        for t in 0..samples {
            w[(t, 0)] = u[t];
            let mut y = sigma * rng.sample::<f64, _>(StandardNormal);
            for k in 1..=order.min(t) {
                y += taps[k - 1] * u[t - k];
            }
            w[(t, 1)] = y;
        }
        build_miso(&DataSet::new(w, None).unwrap(), 1, order).unwrap()
    }

    #[test]
    fn em_recovers_noise_level_on_prior_data() {
        let g = Topology::incoming(2, 1, &[0]).unwrap();
        let mut estimates = Vec::new();
        for seed in 0..20 {
            let p = prior_fir_problem(2000, 20, 0.5, seed);
            let init = HyperParams::initial(1.0, vec![0]).unwrap();
            let (eta, trace) = em_fit(&p, &g, &init, &EmOptions::default()).unwrap();
            assert!(trace.converged, "seed {seed}");
            estimates.push(eta.sigma);
        }
        estimates.sort_by(f64::total_cmp);
        let median = 0.5 * (estimates[9] + estimates[10]);
        assert!((median - 0.5).abs() <= 0.05, "median sigma {median}");
    }

    #[test]
    fn zero_iterations_return_init() {
        let p = random_problem(50, 2, 4, 2);
        let g = Topology::incoming(2, 1, &[0, 1]).unwrap();
        let init = HyperParams::new(0.8, vec![0, 1], vec![0.3, 0.9], vec![0.5, 0.6]).unwrap();
        let opts = EmOptions {
            max_iter: 0,
            ..EmOptions::default()
        };
        let (eta, trace) = em_fit(&p, &g, &init, &opts).unwrap();
        assert_eq!(eta, init);
        assert_eq!(trace.values.len(), 1);
        assert_eq!(trace.iterations, 0);
    }

    #[test]
    fn posterior_matches_dense_formula() {
        let p = random_problem(20, 1, 3, 5);
        let g = Topology::incoming(1, 0, &[0]).unwrap();
        let eta = HyperParams::new(0.7, vec![0], vec![1.2], vec![0.6]).unwrap();
        let post = posterior(&p, &g, &eta).unwrap();
        let a = p.restrict_modules(&[0]);
        let k = dense_prior(&eta, 3);
        let kinv = k.clone().try_inverse().unwrap();
        let s2 = eta.sigma * eta.sigma;
        let precision = a.transpose() * &a / s2 + &kinv;
        let mean = precision.clone().try_inverse().unwrap() * a.transpose() * p.y() / s2;
        assert!((&post.mean - &mean).amax() < 1e-9);
        assert!((&post.precision - &precision).amax() < 1e-9 * precision.amax());
        let ridge = (a.transpose() * &a + kinv * s2).try_inverse().unwrap() * a.transpose() * p.y();
        assert!((&post.mean - ridge).amax() < 1e-9);
        let ident = &post.precision * &post.covariance;
        assert!((ident - DMatrix::identity(3, 3)).amax() < 1e-8);
    }

    #[test]
    fn posterior_mean_of_zero_output_is_zero() {
        let mut w = DMatrix::from_fn(20, 2, |t, _| (t % 5) as f64);
        w.column_mut(0).fill(0.0);
        let p = build_miso(&DataSet::new(w, None).unwrap(), 0, 2).unwrap();
        let g = Topology::incoming(2, 0, &[0, 1]).unwrap();
        let eta = HyperParams::initial_full(1.0, 2).unwrap();
        let post = posterior(&p, &g, &eta).unwrap();
        assert!(post.mean.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flat_prior_tends_to_least_squares() {
        let p = random_problem(80, 2, 3, 6);
        let g = Topology::incoming(2, 1, &[0, 1]).unwrap();
        let eta = HyperParams::new(1.0, vec![0, 1], vec![1e8, 1e8], vec![0.9, 0.9]).unwrap();
        let post = posterior(&p, &g, &eta).unwrap();
        let a = p.restrict_modules(&[0, 1]);
        let ols = (a.transpose() * &a).lu().solve(&(a.transpose() * p.y())).unwrap();
        assert!((&post.mean - &ols).norm() <= 1e-3 * ols.norm());
    }

    #[test]
    fn posterior_mean_is_stationary() {
        let p = random_problem(40, 2, 3, 8);
        let g = Topology::incoming(2, 1, &[0, 1]).unwrap();
        let eta = HyperParams::new(0.9, vec![0, 1], vec![0.5, 2.0], vec![0.7, 0.4]).unwrap();
        let post = posterior(&p, &g, &eta).unwrap();
        let a = p.restrict_modules(&[0, 1]);
        let kinv = dense_prior(&eta, 3).try_inverse().unwrap();
        let s2 = eta.sigma * eta.sigma;
        let log_joint = |theta: &DVector<f64>| {
            let r = p.y() - &a * theta;
            -0.5 * r.norm_squared() / s2 - 0.5 * theta.dot(&(&kinv * theta))
        };
        let h = 1e-5;
        for i in 0..post.mean.len() {
            let mut up = post.mean.clone();
            let mut dn = post.mean.clone();
            up[i] += h;
            dn[i] -= h;
            let grad = (log_joint(&up) - log_joint(&dn)) / (2.0 * h);
            assert!(grad.abs() < 1e-6 * (1.0 + p.yty()), "grad[{i}] = {grad}");
        }
    }

    #[test]
    fn lambda_update_maximizes_q2() {
        let p = random_problem(150, 2, 8, 3);
        let eta = HyperParams::initial_full(1.0, 2).unwrap();
        let estep = e_step(&p, &eta).unwrap();
        let (next, _) = m_step(&estep, &eta).unwrap();
        for (slot, block) in estep.delta_blocks.iter().enumerate() {
            let (l, b) = (next.lambda[slot], next.beta[slot]);
            let best = q2(l, b, block);
            assert!(q2(l * 1.01, b, block) < best);
            assert!(q2(l * 0.99, b, block) < best);
        }
    }

    #[test]
    fn q_decomposition_matches_monte_carlo() {
        // E_post[log p(theta, y; eta)] = Q1 + sum Q2 - (N + m)/2 log(2 pi)
        let p = random_problem(12, 1, 2, 7);
        let at = HyperParams::new(0.9, vec![0], vec![0.8], vec![0.6]).unwrap();
        let eval = HyperParams::new(1.2, vec![0], vec![1.5], vec![0.4]).unwrap();
        let estep = e_step(&p, &at).unwrap();
        let g = Topology::incoming(1, 0, &[0]).unwrap();
        let post = posterior(&p, &g, &at).unwrap();
        let chol = post.covariance.clone().cholesky().unwrap();
        let a = p.restrict_modules(&[0]);
        let k = dense_prior(&eval, 2);
        let kchol = k.clone().cholesky().unwrap();
        let kinv = kchol.inverse();
        let s2 = eval.sigma * eval.sigma;
        let (n, m) = (12.0, 2.0);
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let log_det_k = chol_log_det(&kchol);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 100_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let z = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let theta = &post.mean + chol.l() * z;
            let r = p.y() - &a * &theta;
            acc += -0.5 * r.norm_squared() / s2 - 0.5 * n * s2.ln() - 0.5 * n * ln2pi
                - 0.5 * theta.dot(&(&kinv * &theta))
                - 0.5 * log_det_k
                - 0.5 * m * ln2pi;
        }
        let mc = acc / draws as f64;
        let closed = q1(eval.sigma, &estep)
            + q2(eval.lambda[0], eval.beta[0], &estep.delta_blocks[0])
            - 0.5 * (n + m) * ln2pi;
        assert!((mc - closed).abs() <= 0.01 * closed.abs(), "{mc} vs {closed}");
    }

    #[test]
    fn restrict_hypers_keeps_listed_modules() {
        let full = HyperParams::new(1.0, vec![0, 1, 2], vec![1.0, 2.0, 3.0], vec![0.1, 0.2, 0.3])
            .unwrap();
        let all = Topology::incoming(3, 1, &[0, 1, 2]).unwrap();
        assert_eq!(restrict_hypers(&full, &all), full);
        let own = Topology::incoming(3, 1, &[1]).unwrap();
        let r = restrict_hypers(&full, &own);
        assert_eq!((r.modules.clone(), r.lambda.clone(), r.beta.clone()), (vec![1], vec![2.0], vec![0.2]));
        assert_eq!(r.sigma, 1.0);
        let two = Topology::incoming(3, 1, &[2, 0]).unwrap();
        assert_eq!(restrict_hypers(&full, &two).modules.len(), 2);
    }

    #[test]
    fn hyperparameter_validation() {
        assert!(HyperParams::new(0.0, vec![0], vec![1.0], vec![0.5]).is_err());
        assert!(HyperParams::new(1.0, vec![0], vec![-1.0], vec![0.5]).is_err());
        assert!(HyperParams::new(1.0, vec![0], vec![1.0], vec![1.0]).is_err());
        assert!(HyperParams::new(1.0, vec![1, 0], vec![1.0, 1.0], vec![0.5, 0.5]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert!(draw_initial_sigma(&mut rng) > 0.0);
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn em_never_decreases_the_score(
            seed in 0u64..1000,
            sigma0 in 0.2f64..3.0,
            lambda0 in 0.05f64..5.0,
            beta0 in 0.05f64..0.95,
        ) {
            let p = random_problem(60, 3, 5, seed);
            let g = Topology::incoming(3, 2, &[0, 1, 2]).unwrap();
            let init = HyperParams::uniform(sigma0, vec![0, 1, 2], lambda0, beta0).unwrap();
            let opts = EmOptions { max_iter: 30, ..EmOptions::default() };
            let (_, trace) = em_fit(&p, &g, &init, &opts).unwrap();
            for w in trace.values.windows(2) {
                proptest::prop_assert!(w[1] >= w[0] - 1e-8 * (1.0 + w[0].abs()));
            }
        }
    }
}
