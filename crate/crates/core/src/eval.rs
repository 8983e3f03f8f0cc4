//! Scoring of topology estimates and the Monte-Carlo benchmark.
//!
//! Per trial, TPR and FPR are computed on the whole network (counts pooled
//! over its MISO problems) and then averaged over trials. Trials whose true
//! topology is empty have no positives and only enter the FPR average.

use std::io::Write;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::{draw_initial_sigma, EmOptions};
use crate::error::{Error, Result};
use crate::glasso::{
    beta_grid, cross_validate, delta_grid, fit_warm, topology_from_theta, GlassoConfig, GlassoMethod,
    SplitRule, SUPPORT_EPS,
};
use crate::model::{generate_random, simulate, true_topology, DataSet, GeneratorOptions, Topology};
use crate::predictor::build_miso;
use crate::search::{identify_network_taus, SearchConfig, SearchMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    /// Edges of the true topology.
    pub positives: usize,
    /// Absent off-diagonal pairs of the true topology.
    pub negatives: usize,
}

impl ConfusionCounts {
    pub fn tpr(&self) -> Option<f64> {
        (self.positives > 0).then(|| self.tp as f64 / self.positives as f64)
    }

    pub fn fpr(&self) -> Option<f64> {
        (self.negatives > 0).then(|| self.fp as f64 / self.negatives as f64)
    }
}

/// Counts over the `L^2 - L` off-diagonal pairs; self-loops are ignored.
pub fn confusion(estimate: &Topology, truth: &Topology, nodes: usize) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for target in 0..nodes {
        for source in (0..nodes).filter(|&s| s != target) {
            let real = truth.contains(source, target);
            let found = estimate.contains(source, target);
            match (real, found) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                _ => {}
            }
            if real {
                c.positives += 1;
            } else {
                c.negatives += 1;
            }
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub tuning: String,
    pub tpr: f64,
    pub fpr: f64,
}

/// Distance of `(FPR, TPR)` to the ideal corner `(0, 1)`.
pub fn dis(point: &RocPoint) -> f64 {
    dis_of(point.tpr, point.fpr)
}

pub fn dis_of(tpr: f64, fpr: f64) -> f64 {
    (fpr * fpr + (1.0 - tpr) * (1.0 - tpr)).sqrt()
}

/// Number of `tau` values `{0, 1, ..., 10}` the V measure averages over.
pub const V_POINTS: usize = 11;

/// Mean relative change of `dis` of the iterative-EM search over the
/// fixed-hyperparameter search, in percent; positive means worse.
pub fn v_measure(dis_iter: &[f64], dis_bs: &[f64]) -> Result<f64> {
    if dis_iter.len() != V_POINTS || dis_bs.len() != V_POINTS {
        return Err(Error::InvalidInput(format!(
            "V needs exactly {V_POINTS} paired values, got {} and {}",
            dis_iter.len(),
            dis_bs.len()
        )));
    }
    if let Some(k) = dis_bs.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::Domain(format!("dis of the reference search is {} at index {k}", dis_bs[k])));
    }
    let sum: f64 = dis_iter.iter().zip(dis_bs).map(|(i, b)| (i - b) / b).sum();
    Ok(sum / V_POINTS as f64 * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub samples: usize,
    pub order: usize,
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    #[serde(default = "default_edge_prob")]
    pub edge_prob: f64,
}

fn default_nodes() -> usize {
    6
}

fn default_edge_prob() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum MethodSpec {
    /// Search with full-graph hyperparameters, one ROC point per `tau`.
    Bs {
        #[serde(default = "default_taus")]
        taus: Vec<f64>,
    },
    /// Search with EM refits of every candidate, one ROC point per `tau`.
    BsIterEm {
        #[serde(default = "default_taus")]
        taus: Vec<f64>,
    },
    /// Group Lasso, one ROC point per `delta`.
    Glasso {
        #[serde(default = "default_deltas")]
        deltas: Vec<f64>,
    },
    /// Kernel group Lasso at a fixed `beta`, one ROC point per `delta`.
    Kglasso {
        #[serde(default = "default_deltas")]
        deltas: Vec<f64>,
        #[serde(default = "default_beta")]
        beta: f64,
    },
    /// Group Lasso with `delta` chosen per MISO problem by cross-validation.
    GlassoCv {
        #[serde(default = "default_deltas")]
        deltas: Vec<f64>,
    },
    /// Kernel group Lasso with `(delta, beta)` chosen by cross-validation.
    KglassoCv {
        #[serde(default = "default_deltas")]
        deltas: Vec<f64>,
        #[serde(default = "beta_grid")]
        betas: Vec<f64>,
    },
}

fn default_taus() -> Vec<f64> {
    (0..V_POINTS).map(|k| k as f64).collect()
}

fn default_deltas() -> Vec<f64> {
    delta_grid(2000.0, 10.0)
}

fn default_beta() -> f64 {
    crate::glasso::DEFAULT_BETA
}

impl MethodSpec {
    pub fn name(&self) -> &'static str {
        match self {
            MethodSpec::Bs { .. } => "bs",
            MethodSpec::BsIterEm { .. } => "bs-iter-em",
            MethodSpec::Glasso { .. } => "glasso",
            MethodSpec::Kglasso { .. } => "kglasso",
            MethodSpec::GlassoCv { .. } => "glasso-cv",
            MethodSpec::KglassoCv { .. } => "kglasso-cv",
        }
    }

    fn tunings(&self) -> Vec<String> {
        match self {
            MethodSpec::Bs { taus } | MethodSpec::BsIterEm { taus } => {
                taus.iter().map(|t| format!("tau={t}")).collect()
            }
            MethodSpec::Glasso { deltas } | MethodSpec::Kglasso { deltas, .. } => {
                deltas.iter().map(|d| format!("delta={d}")).collect()
            }
            MethodSpec::GlassoCv { .. } | MethodSpec::KglassoCv { .. } => vec!["cv".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub conditions: Vec<Condition>,
    pub methods: Vec<MethodSpec>,
    pub trials: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub em: EmOptions,
}

impl ExperimentSpec {
    /// All problems of the experiment, listed together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.trials == 0 {
            problems.push("trials must be >= 1".to_string());
        }
        for c in &self.conditions {
            if c.samples < 2 {
                problems.push(format!("condition {}: samples must be >= 2", c.name));
            }
            if c.order == 0 {
                problems.push(format!("condition {}: order must be >= 1", c.name));
            }
            if c.nodes == 0 {
                problems.push(format!("condition {}: nodes must be >= 1", c.name));
            }
            if !(0.0..=1.0).contains(&c.edge_prob) {
                problems.push(format!("condition {}: edge_prob {} outside [0, 1]", c.name, c.edge_prob));
            }
        }
        let bad = |v: &f64| !(*v >= 0.0 && v.is_finite());
        for m in &self.methods {
            let name = m.name();
            match m {
                MethodSpec::Bs { taus } | MethodSpec::BsIterEm { taus } => {
                    if taus.is_empty() || taus.iter().any(bad) {
                        problems.push(format!("{name}: taus must be non-empty and >= 0"));
                    }
                }
                MethodSpec::Glasso { deltas } | MethodSpec::GlassoCv { deltas } => {
                    if deltas.is_empty() || deltas.iter().any(bad) {
                        problems.push(format!("{name}: deltas must be non-empty and >= 0"));
                    }
                }
                MethodSpec::Kglasso { deltas, beta } => {
                    if deltas.is_empty() || deltas.iter().any(bad) {
                        problems.push(format!("{name}: deltas must be non-empty and >= 0"));
                    }
                    if !(*beta > 0.0 && *beta < 1.0) {
                        problems.push(format!("{name}: beta {beta} outside (0, 1)"));
                    }
                }
                MethodSpec::KglassoCv { deltas, betas } => {
                    if deltas.is_empty() || deltas.iter().any(bad) {
                        problems.push(format!("{name}: deltas must be non-empty and >= 0"));
                    }
                    if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
                        problems.push(format!("{name}: betas must be non-empty and inside (0, 1)"));
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

pub const PRESETS: &[&str] = &[
    "paper-N2000",
    "paper-N500",
    "paper-N50",
    "paper-N2000-desk",
    "paper-N500-desk",
    "paper-N50-desk",
];

fn all_methods() -> Vec<MethodSpec> {
    vec![
        MethodSpec::Bs { taus: default_taus() },
        MethodSpec::BsIterEm { taus: default_taus() },
        MethodSpec::GlassoCv { deltas: default_deltas() },
        MethodSpec::KglassoCv {
            deltas: default_deltas(),
            betas: beta_grid(),
        },
    ]
}

/// Named benchmark configurations. The `paper-*` presets use the original
/// conditions with 50 trials; the `-desk` variants use 20 trials and a
/// shorter FIR order and do not reproduce the original setting exactly.
pub fn preset(name: &str, master_seed: u64) -> Result<ExperimentSpec> {
    let (samples, order, trials) = match name {
        "paper-N2000" => (2000, 100, 50),
        "paper-N500" => (500, 100, 50),
        "paper-N50" => (50, 50, 50),
        "paper-N2000-desk" => (2000, 50, 20),
        "paper-N500-desk" => (500, 50, 20),
        "paper-N50-desk" => (50, 20, 20),
        _ => {
            return Err(Error::Config(format!(
                "unknown preset {name}; known: {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(ExperimentSpec {
        conditions: vec![Condition {
            name: name.to_string(),
            samples,
            order,
            nodes: 6,
            edge_prob: 0.5,
        }],
        methods: all_methods(),
        trials,
        master_seed,
        output_dir: None,
        em: EmOptions::default(),
    })
}

/// Seed for `(master, parts...)` by SplitMix64 mixing.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(master), |acc, &p| mix(acc ^ mix(p)))
}

/// One simulated benchmark data set.
#[derive(Debug, Clone)]
pub struct Trial {
    pub truth: Topology,
    pub data: DataSet,
    pub sigma0: f64,
}

/// Generates trial `index` of `condition`; identical for every method.
pub fn make_trial(spec: &ExperimentSpec, condition: usize, index: usize) -> Result<Trial> {
    let c = &spec.conditions[condition];
    let base = derive_seed(spec.master_seed, &[condition as u64, index as u64]);
    let sys = generate_random(c.nodes, c.edge_prob, GeneratorOptions::default(), derive_seed(base, &[0]))?;
    let data = simulate(&sys, c.samples, derive_seed(base, &[1]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base, &[2]));
    Ok(Trial {
        truth: true_topology(&sys),
        data,
        sigma0: draw_initial_sigma(&mut rng),
    })
}

/// Network estimates of `method` on `trial`, one per tuning value.
pub fn run_method(method: &MethodSpec, trial: &Trial, order: usize, em: &EmOptions) -> Result<Vec<Topology>> {
    let nodes = trial.data.nodes();
    match method {
        MethodSpec::Bs { taus } | MethodSpec::BsIterEm { taus } => {
            let cfg = SearchConfig {
                mode: if matches!(method, MethodSpec::Bs { .. }) {
                    SearchMode::FixedHypers
                } else {
                    SearchMode::IterativeEm
                },
                em: *em,
                sigma0: trial.sigma0,
                ..SearchConfig::default()
            };
            Ok(identify_network_taus(&trial.data, order, &cfg, taus)?
                .into_iter()
                .map(|e| e.topology)
                .collect())
        }
        MethodSpec::Glasso { deltas } | MethodSpec::Kglasso { deltas, .. } => {
            let (kind, beta) = match method {
                MethodSpec::Kglasso { beta, .. } => (GlassoMethod::Kernel, *beta),
                _ => (GlassoMethod::Plain, crate::glasso::DEFAULT_BETA),
            };
            let mut out = vec![Topology::network(nodes); deltas.len()];
            let mut by_delta: Vec<usize> = (0..deltas.len()).collect();
            by_delta.sort_by(|&a, &b| deltas[b].total_cmp(&deltas[a]));
            for j in 0..nodes {
                let problem = build_miso(&trial.data, j, order).map_err(|e| e.at_node(j))?;
                let mut warm = None;
                for &k in &by_delta {
                    let cfg = GlassoConfig {
                        delta: deltas[k],
                        beta,
                        standardize: true,
                        ..GlassoConfig::default()
                    };
                    let f = fit_warm(&problem, &cfg, kind, warm.as_ref()).map_err(|e| e.at_node(j))?;
                    let g = topology_from_theta(&f.theta, nodes, SUPPORT_EPS);
                    out[k] = out[k].union(&g.without_self_loops());
                    warm = Some(f.theta);
                }
            }
            Ok(out)
        }
        MethodSpec::GlassoCv { deltas } | MethodSpec::KglassoCv { deltas, .. } => {
            let (kind, betas) = match method {
                MethodSpec::KglassoCv { betas, .. } => (GlassoMethod::Kernel, betas.clone()),
                _ => (GlassoMethod::Plain, vec![crate::glasso::DEFAULT_BETA]),
            };
            let base = GlassoConfig {
                standardize: true,
                ..GlassoConfig::default()
            };
            let mut net = Topology::network(nodes);
            for j in 0..nodes {
                let problem = build_miso(&trial.data, j, order).map_err(|e| e.at_node(j))?;
                let cv = cross_validate(&problem, kind, deltas, &betas, SplitRule::TwoThirds, &base)
                    .map_err(|e| e.at_node(j))?;
                let f = fit_warm(&problem, &cv.config, kind, None).map_err(|e| e.at_node(j))?;
                net = net.union(&topology_from_theta(&f.theta, nodes, SUPPORT_EPS).without_self_loops());
            }
            Ok(vec![net])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub condition: String,
    pub method: String,
    pub tuning: String,
    pub tpr: f64,
    pub fpr: f64,
    pub dis: f64,
    /// Trials that entered the FPR average.
    pub trials: usize,
    pub failures: usize,
    /// Trials without true edges (excluded from the TPR average).
    #[serde(skip)]
    pub no_positive_trials: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchmarkTable {
    pub rows: Vec<ResultRow>,
}

pub const CSV_HEADER: [&str; 8] = ["condition", "method", "tuning", "TPR", "FPR", "dis", "trials", "failures"];

impl BenchmarkTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.condition.clone(),
                r.method.clone(),
                r.tuning.clone(),
                r.tpr.to_string(),
                r.fpr.to_string(),
                r.dis.to_string(),
                r.trials.to_string(),
                r.failures.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn find(&self, condition: &str, method: &str, tuning: &str) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.condition == condition && r.method == method && r.tuning == tuning)
    }

    /// V of the iterative-EM search against the fixed-hyperparameter search
    /// over `tau = 0..10` for `condition`.
    pub fn v_measure(&self, condition: &str) -> Result<f64> {
        let collect = |method: &str| -> Result<Vec<f64>> {
            (0..V_POINTS)
                .map(|t| {
                    self.find(condition, method, &format!("tau={t}"))
                        .map(|r| r.dis)
                        .ok_or_else(|| Error::InvalidInput(format!("no {method} row for tau={t}")))
                })
                .collect()
        };
        v_measure(&collect("bs-iter-em")?, &collect("bs")?)
    }
}

/// Largest tolerated share of failed trials per method.
pub const MAX_FAILURE_SHARE: f64 = 0.2;

/// Runs every method on every trial of every condition. Trials run on a
/// pool of `threads` workers (all cores when `None`); results are reduced in
/// trial order, so the table does not depend on the thread count.
pub fn run_benchmark(spec: &ExperimentSpec, threads: Option<usize>) -> Result<BenchmarkTable> {
    spec.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut table = BenchmarkTable::default();
    if spec.methods.is_empty() {
        return Ok(table);
    }
    for (ci, cond) in spec.conditions.iter().enumerate() {
        info!("condition {}: {} trials", cond.name, spec.trials);
        let per_trial: Vec<Result<(Topology, Vec<Result<Vec<Topology>>>)>> = pool.install(|| {
            (0..spec.trials)
                .into_par_iter()
                .map(|t| {
                    let trial = make_trial(spec, ci, t)?;
                    let results = spec
                        .methods
                        .iter()
                        .map(|m| run_method(m, &trial, cond.order, &spec.em))
                        .collect();
                    info!("condition {} trial {} done", cond.name, t + 1);
                    Ok((trial.truth, results))
                })
                .collect()
        });
        for (mi, method) in spec.methods.iter().enumerate() {
            let tunings = method.tunings();
            let mut sums = vec![(0.0, 0.0, 0usize, 0usize); tunings.len()];
            let mut failures = 0;
            let mut used = 0;
            for (t, outcome) in per_trial.iter().enumerate() {
                let estimates = match outcome {
                    Ok((truth, results)) => match &results[mi] {
                        Ok(est) => Some((truth, est)),
                        Err(e) => {
                            warn!("{} trial {t}: {} failed: {e}", cond.name, method.name());
                            None
                        }
                    },
                    Err(e) => {
                        warn!("{} trial {t}: data generation failed: {e}", cond.name);
                        None
                    }
                };
                let Some((truth, est)) = estimates else {
                    failures += 1;
                    continue;
                };
                used += 1;
                for (k, g) in est.iter().enumerate() {
                    let c = confusion(g, truth, cond.nodes);
                    if let Some(tpr) = c.tpr() {
                        sums[k].0 += tpr;
                        sums[k].2 += 1;
                    }
                    // no negatives only for a complete true graph: no false positives possible
                    sums[k].1 += c.fpr().unwrap_or(0.0);
                    sums[k].3 += 1;
                }
            }
            if failures as f64 > MAX_FAILURE_SHARE * spec.trials as f64 {
                return Err(Error::TooManyFailures {
                    failed: failures,
                    total: spec.trials,
                });
            }
            for (k, tuning) in tunings.into_iter().enumerate() {
                let (tpr_sum, fpr_sum, with_pos, n) = sums[k];
                let tpr = if with_pos > 0 { tpr_sum / with_pos as f64 } else { f64::NAN };
                let fpr = if n > 0 { fpr_sum / n as f64 } else { f64::NAN };
                if with_pos < n {
                    info!(
                        "{} {} {tuning}: {} trial(s) without true edges left out of TPR",
                        cond.name,
                        method.name(),
                        n - with_pos
                    );
                }
                table.rows.push(ResultRow {
                    condition: cond.name.clone(),
                    method: method.name().to_string(),
                    tuning,
                    tpr,
                    fpr,
                    dis: dis_of(tpr, fpr),
                    trials: used,
                    failures,
                    no_positive_trials: n - with_pos,
                });
            }
        }
    }
    Ok(table)
}

/// Threads requested through `NETTOP_THREADS`, if set to a positive number.
pub fn threads_from_env() -> Option<usize> {
    std::env::var("NETTOP_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}
