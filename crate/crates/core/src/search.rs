//! Greedy forward-backward search for the incoming edges of each node and
//! the merge of the per-node results into a network topology.
//!
//! The search starts from the self-loop `{(j, j)}`, adds the single best
//! edge while that improves the score by more than `tau`, then deletes the
//! single best edge while that improves the score by more than `tau`.

use std::collections::HashMap;
use std::io::Write;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::{em_fit, em_fit_modules, EmOptions, EmTrace, HyperParams, ScoreEngine};
use crate::error::{Error, Result};
use crate::model::{DataSet, Topology};
use crate::predictor::{build_miso, MisoProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMode {
    /// Hyperparameters estimated once on the full graph.
    #[default]
    FixedHypers,
    /// Every candidate re-fitted by EM from the full-graph estimate.
    IterativeEm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    /// Among equal scores the candidate with the lowest source index wins.
    #[default]
    LowestSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub tau: f64,
    pub mode: SearchMode,
    pub tie_break: TieBreak,
    pub em: EmOptions,
    /// Initial noise level for the full-graph EM, shared by all nodes.
    pub sigma0: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            tau: 0.0,
            mode: SearchMode::FixedHypers,
            tie_break: TieBreak::LowestSource,
            em: EmOptions::default(),
            sigma0: 1.0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau = {} must be >= 0", self.tau)));
        }
        if self.tau > 10.0 {
            warn!("tau = {} is outside the usual range [0, 10]", self.tau);
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(Error::Config(format!("sigma0 = {} must be > 0", self.sigma0)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Add,
    Delete,
}

/// Best candidate of one round of a phase; a rejected step ends its phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchStep {
    pub phase: Phase,
    pub source: usize,
    pub target: usize,
    pub j_before: f64,
    pub j_after: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub target: usize,
    pub tau: f64,
    pub steps: Vec<SearchStep>,
    /// Sources of the returned predictor topology, self-loop included.
    pub predictor_sources: Vec<usize>,
    pub self_loop_deleted: bool,
    /// Score of the returned predictor topology.
    pub score: f64,
}

impl SearchTrace {
    /// One JSON object per step.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for step in &self.steps {
            serde_json::to_writer(&mut out, step)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Scores subsets of modules for one search.
trait Scorer {
    fn score(&mut self, modules: &[usize]) -> Result<f64>;
}

struct FixedScorer<'a> {
    engine: ScoreEngine<'a>,
    cache: HashMap<Vec<usize>, f64>,
}

impl Scorer for FixedScorer<'_> {
    fn score(&mut self, modules: &[usize]) -> Result<f64> {
        if let Some(&j) = self.cache.get(modules) {
            return Ok(j);
        }
        let j = self.engine.score(modules)?;
        self.cache.insert(modules.to_vec(), j);
        Ok(j)
    }
}

/// Every candidate starts its EM run from `init` restricted to its modules,
/// so incumbent and candidates get the same iteration budget from
/// comparable points. Chaining warm starts through the incumbent would
/// credit each candidate with the incumbent's own unfinished convergence.
struct RefitScorer<'a> {
    problem: &'a MisoProblem,
    init: HyperParams,
    opts: EmOptions,
    cache: HashMap<Vec<usize>, f64>,
}

impl Scorer for RefitScorer<'_> {
    fn score(&mut self, modules: &[usize]) -> Result<f64> {
        if let Some(&j) = self.cache.get(modules) {
            return Ok(j);
        }
        let (_, trace) = em_fit_modules(self.problem, &self.init.for_modules(modules)?, &self.opts)?;
        let j = *trace.values.last().expect("EM trace holds the initial score");
        self.cache.insert(modules.to_vec(), j);
        Ok(j)
    }
}

fn without(modules: &[usize], drop: usize) -> Vec<usize> {
    modules.iter().copied().filter(|&m| m != drop).collect()
}

fn with(modules: &[usize], add: usize) -> Vec<usize> {
    let mut out = modules.to_vec();
    let at = out.partition_point(|&m| m < add);
    out.insert(at, add);
    out
}

fn run_search(
    scorer: &mut dyn Scorer,
    nodes: usize,
    target: usize,
    tau: f64,
) -> Result<(Vec<usize>, SearchTrace)> {
    let mut current = vec![target];
    let mut j_cur = scorer.score(&current)?;
    let mut steps = Vec::new();

    for _ in 1..nodes {
        let mut best: Option<(usize, f64)> = None;
        for source in (0..nodes).filter(|s| !current.contains(s)) {
            let j = scorer.score(&with(&current, source))?;
            if best.is_none_or(|(_, b)| j > b) {
                best = Some((source, j));
            }
        }
        let Some((source, j)) = best else { break };
        let accepted = j - j_cur > tau;
        steps.push(SearchStep {
            phase: Phase::Add,
            source,
            target,
            j_before: j_cur,
            j_after: j,
            accepted,
        });
        if !accepted {
            break;
        }
        current = with(&current, source);
        j_cur = j;
    }

    let budget = current.len();
    let mut self_loop_deleted = false;
    for _ in 0..budget {
        let mut best: Option<(usize, f64)> = None;
        for &source in &current {
            let j = scorer.score(&without(&current, source))?;
            if best.is_none_or(|(_, b)| j > b) {
                best = Some((source, j));
            }
        }
        let Some((source, j)) = best else { break };
        let accepted = j - j_cur > tau;
        steps.push(SearchStep {
            phase: Phase::Delete,
            source,
            target,
            j_before: j_cur,
            j_after: j,
            accepted,
        });
        if !accepted {
            break;
        }
        self_loop_deleted |= source == target;
        current = without(&current, source);
        j_cur = j;
    }

    let trace = SearchTrace {
        target,
        tau,
        steps,
        predictor_sources: current.clone(),
        self_loop_deleted,
        score: j_cur,
    };
    Ok((current, trace))
}

fn to_topology(nodes: usize, target: usize, modules: &[usize]) -> Topology {
    Topology::incoming(nodes, target, modules).expect("sources within range")
}

/// Repeated searches on one MISO problem (e.g. over several `tau`) sharing
/// one score cache.
pub struct SearchSession<'a> {
    problem: &'a MisoProblem,
    fixed: Option<FixedScorer<'a>>,
    refit: Option<RefitScorer<'a>>,
}

impl<'a> SearchSession<'a> {
    /// Candidates scored at the fixed full-graph hyperparameters.
    pub fn fixed(problem: &'a MisoProblem, full_hypers: &HyperParams) -> Result<Self> {
        let all: Vec<usize> = (0..problem.nodes()).collect();
        let eta = full_hypers.for_modules(&all)?;
        Ok(Self {
            problem,
            fixed: Some(FixedScorer {
                engine: ScoreEngine::new(problem, &eta)?,
                cache: HashMap::new(),
            }),
            refit: None,
        })
    }

    /// Candidates re-fitted by EM, each started from `init` restricted to
    /// its modules.
    pub fn iterative(problem: &'a MisoProblem, init: &HyperParams, opts: &EmOptions) -> Result<Self> {
        let all: Vec<usize> = (0..problem.nodes()).collect();
        Ok(Self {
            problem,
            fixed: None,
            refit: Some(RefitScorer {
                problem,
                init: init.for_modules(&all)?,
                opts: *opts,
                cache: HashMap::new(),
            }),
        })
    }

    pub fn run(&mut self, tau: f64) -> Result<(Topology, SearchTrace)> {
        if !(tau >= 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("tau = {tau} must be >= 0")));
        }
        let nodes = self.problem.nodes();
        let target = self.problem.target();
        let scorer: &mut dyn Scorer = match (&mut self.fixed, &mut self.refit) {
            (Some(f), _) => f,
            (None, Some(r)) => r,
            (None, None) => unreachable!("session always holds a scorer"),
        };
        let (modules, trace) = run_search(scorer, nodes, target, tau)?;
        Ok((to_topology(nodes, target, &modules), trace))
    }
}

/// Search with hyperparameters fixed at `full_hypers` (covering all modules).
pub fn bs_search(
    problem: &MisoProblem,
    full_hypers: &HyperParams,
    cfg: &SearchConfig,
) -> Result<(Topology, SearchTrace)> {
    cfg.validate()?;
    SearchSession::fixed(problem, full_hypers)?.run(cfg.tau)
}

/// Search in which each candidate's hyperparameters are re-fitted by EM.
pub fn bs_search_iterative_em(
    problem: &MisoProblem,
    init: &HyperParams,
    cfg: &SearchConfig,
) -> Result<(Topology, SearchTrace)> {
    cfg.validate()?;
    SearchSession::iterative(problem, init, &cfg.em)?.run(cfg.tau)
}

/// Per-node result of [`identify_network`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub target: usize,
    pub full_graph_em: EmTraceSummary,
    pub trace: SearchTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmTraceSummary {
    pub values: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub m_clamped: bool,
}

impl From<&EmTrace> for EmTraceSummary {
    fn from(t: &EmTrace) -> Self {
        Self {
            values: t.values.clone(),
            iterations: t.iterations,
            converged: t.converged,
            m_clamped: t.m_clamped,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkEstimate {
    pub topology: Topology,
    pub nodes: Vec<NodeReport>,
}

/// Full-graph EM for node `target`; the search's starting hyperparameters.
pub fn full_graph_hypers(
    problem: &MisoProblem,
    sigma0: f64,
    opts: &EmOptions,
) -> Result<(HyperParams, EmTrace)> {
    let full: Vec<usize> = (0..problem.nodes()).collect();
    let g = to_topology(problem.nodes(), problem.target(), &full);
    em_fit(problem, &g, &HyperParams::initial(sigma0, full)?, opts)
}

/// Runs the search on every node for each `tau` and merges the results;
/// one estimate per `tau`, in order.
pub fn identify_network_taus(
    data: &DataSet,
    order: usize,
    cfg: &SearchConfig,
    taus: &[f64],
) -> Result<Vec<NetworkEstimate>> {
    cfg.validate()?;
    if data.w().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("data contain non-finite values".into()));
    }
    let nodes = data.nodes();
    let per_node: Vec<Result<Vec<(Topology, NodeReport)>>> = (0..nodes)
        .into_par_iter()
        .map(|j| search_node(data, order, cfg, taus, j).map_err(|e| e.at_node(j)))
        .collect();
    let mut estimates: Vec<NetworkEstimate> = taus
        .iter()
        .map(|_| NetworkEstimate {
            topology: Topology::network(nodes),
            nodes: Vec::with_capacity(nodes),
        })
        .collect();
    for result in per_node {
        for (est, (predictor, report)) in estimates.iter_mut().zip(result?) {
            est.topology = est.topology.union(&predictor.without_self_loops());
            est.nodes.push(report);
        }
    }
    Ok(estimates)
}

fn search_node(
    data: &DataSet,
    order: usize,
    cfg: &SearchConfig,
    taus: &[f64],
    target: usize,
) -> Result<Vec<(Topology, NodeReport)>> {
    let problem = build_miso(data, target, order)?;
    let (full, em_trace) = full_graph_hypers(&problem, cfg.sigma0, &cfg.em)?;
    let mut session = match cfg.mode {
        SearchMode::FixedHypers => SearchSession::fixed(&problem, &full)?,
        SearchMode::IterativeEm => SearchSession::iterative(&problem, &full, &cfg.em)?,
    };
    taus.iter()
        .map(|&tau| {
            let (g, trace) = session.run(tau)?;
            Ok((
                g,
                NodeReport {
                    target,
                    full_graph_em: EmTraceSummary::from(&em_trace),
                    trace,
                },
            ))
        })
        .collect()
}

/// Network topology estimate at `cfg.tau`, with per-node traces.
pub fn identify_network(data: &DataSet, order: usize, cfg: &SearchConfig) -> Result<NetworkEstimate> {
    Ok(identify_network_taus(data, order, cfg, &[cfg.tau])?
        .pop()
        .expect("one estimate per tau"))
}
