use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use nettop::bayes::{draw_initial_sigma, EmOptions};
use nettop::eval::{derive_seed, preset, run_benchmark, threads_from_env, ExperimentSpec};
use nettop::glasso::{
    cross_validate, fit_warm, topology_from_theta, CvPoint, GlassoConfig, GlassoMethod, SplitRule, SUPPORT_EPS,
};
use nettop::model::{generate_random, simulate, GeneratorOptions};
use nettop::predictor::build_miso;
use nettop::search::{bs_search, bs_search_iterative_em, full_graph_hypers, identify_network, SearchConfig, SearchMode};
use nettop::{DataSet, Topology};

use crate::output::{atomic_write, write_json, write_jsonl, TopologyDoc};
use crate::Method;

/// `a`, `a,b,c` or `start:stop:step` (inclusive of `stop` up to rounding).
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let text = text.trim();
    let num = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .with_context(|| format!("cannot parse {s:?} in grid {text:?}"))
    };
    let values = if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            bail!("range grid must be start:stop:step, got {text:?}");
        }
        let (start, stop, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if !(step > 0.0) || stop < start {
            bail!("range grid {text:?} needs step > 0 and stop >= start");
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize;
        (0..=count).map(|k| start + k as f64 * step).collect()
    } else {
        text.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        bail!("grid {text:?} must hold finite values");
    }
    Ok(values)
}

fn read_data(path: &Path) -> Result<DataSet> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    DataSet::read_csv(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn initial_sigma(seed: u64) -> f64 {
    draw_initial_sigma(&mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Serialize)]
struct GenerateManifest {
    nodes: usize,
    samples: usize,
    edge_prob: f64,
    seed: u64,
    system_seed: u64,
    data_seed: u64,
    edges: usize,
}

pub fn generate(nodes: usize, samples: usize, edge_prob: f64, seed: u64, out: &Path) -> Result<()> {
    let system_seed = derive_seed(seed, &[0]);
    let data_seed = derive_seed(seed, &[1]);
    let sys = generate_random(nodes, edge_prob, GeneratorOptions::default(), system_seed)?;
    let data = simulate(&sys, samples, data_seed)?;
    let edges = sys.modules().count();
    write_json(&out.join("system.json"), &sys)?;
    atomic_write(&out.join("data.csv"), |w| Ok(data.write_csv(w)?))?;
    write_json(
        &out.join("manifest.json"),
        &GenerateManifest {
            nodes,
            samples,
            edge_prob,
            seed,
            system_seed,
            data_seed,
            edges,
        },
    )?;
    info!("{nodes} nodes, {edges} edges, {samples} samples written to {}", out.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentifyArgs {
    pub method: Method,
    pub order: usize,
    pub tau: f64,
    pub delta_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
    pub seed: u64,
}

/// Fields of an identify config file; present fields replace the flags.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct IdentifyConfig {
    method: Option<Method>,
    order: Option<usize>,
    tau: Option<f64>,
    delta_grid: Option<Vec<f64>>,
    beta_grid: Option<Vec<f64>>,
    seed: Option<u64>,
}

impl IdentifyArgs {
    fn overridden(mut self, cfg: IdentifyConfig) -> Self {
        if let Some(v) = cfg.method {
            self.method = v;
        }
        if let Some(v) = cfg.order {
            self.order = v;
        }
        if let Some(v) = cfg.tau {
            self.tau = v;
        }
        if let Some(v) = cfg.delta_grid {
            self.delta_grid = v;
        }
        if let Some(v) = cfg.beta_grid {
            self.beta_grid = v;
        }
        if let Some(v) = cfg.seed {
            self.seed = v;
        }
        self
    }
}

#[derive(Serialize)]
struct GlassoNodeTrace {
    target: usize,
    delta: f64,
    beta: Option<f64>,
    converged: bool,
    sweeps: usize,
    objective: f64,
    /// `(source, ||theta_source||)` on the original data scale.
    block_norms: Vec<(usize, f64)>,
    cv: Option<Vec<CvPoint>>,
}

#[derive(Serialize)]
struct Timing {
    method: Method,
    nodes: usize,
    samples: usize,
    order: usize,
    seconds: f64,
}

pub fn identify(data_path: &Path, args: IdentifyArgs, config: Option<&Path>, out: &Path) -> Result<()> {
    let args = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let cfg: IdentifyConfig =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            args.overridden(cfg)
        }
        None => args,
    };
    let data = read_data(data_path)?;
    let start = Instant::now();
    let topology = match args.method {
        Method::Bs | Method::BsIterEm => {
            let cfg = SearchConfig {
                tau: args.tau,
                mode: if args.method == Method::Bs {
                    SearchMode::FixedHypers
                } else {
                    SearchMode::IterativeEm
                },
                sigma0: initial_sigma(args.seed),
                ..SearchConfig::default()
            };
            let est = identify_network(&data, args.order, &cfg)?;
            write_jsonl(&out.join("traces.jsonl"), &est.nodes)?;
            est.topology
        }
        Method::Glasso | Method::Kglasso => {
            let (g, traces) = identify_glasso(&data, &args)?;
            write_jsonl(&out.join("traces.jsonl"), &traces)?;
            g
        }
    };
    let seconds = start.elapsed().as_secs_f64();
    write_json(&out.join("topology.json"), &TopologyDoc::from(&topology))?;
    write_json(
        &out.join("timing.json"),
        &Timing {
            method: args.method,
            nodes: data.nodes(),
            samples: data.samples(),
            order: args.order,
            seconds,
        },
    )?;
    info!("{} edges found in {seconds:.2}s", topology.len());
    Ok(())
}

fn identify_glasso(data: &DataSet, args: &IdentifyArgs) -> Result<(Topology, Vec<GlassoNodeTrace>)> {
    let kernel = args.method == Method::Kglasso;
    let kind = if kernel { GlassoMethod::Kernel } else { GlassoMethod::Plain };
    let base = GlassoConfig {
        standardize: true,
        ..GlassoConfig::default()
    };
    let nodes = data.nodes();
    let mut net = Topology::network(nodes);
    let mut traces = Vec::with_capacity(nodes);
    for j in 0..nodes {
        let problem = build_miso(data, j, args.order).with_context(|| format!("node {j}"))?;
        let tune = args.delta_grid.len() > 1 || (kernel && args.beta_grid.len() > 1);
        let (cfg, cv) = if tune {
            let cv = cross_validate(&problem, kind, &args.delta_grid, &args.beta_grid, SplitRule::TwoThirds, &base)
                .with_context(|| format!("node {j}: cross-validation"))?;
            (cv.config, Some(cv.points))
        } else {
            let cfg = GlassoConfig {
                delta: args.delta_grid[0],
                beta: if kernel { args.beta_grid[0] } else { base.beta },
                ..base
            };
            (cfg, None)
        };
        let fit = fit_warm(&problem, &cfg, kind, None).with_context(|| format!("node {j}"))?;
        if !fit.converged {
            warn!("node {j}: group Lasso stopped after {} sweeps without converging", fit.sweeps);
        }
        net = net.union(&topology_from_theta(&fit.theta, nodes, SUPPORT_EPS).without_self_loops());
        traces.push(GlassoNodeTrace {
            target: j,
            delta: cfg.delta,
            beta: kernel.then_some(cfg.beta),
            converged: fit.converged,
            sweeps: fit.sweeps,
            objective: fit.objective,
            block_norms: fit.theta.block_norms(),
            cv,
        });
    }
    Ok((net, traces))
}

#[derive(Serialize)]
struct BenchmarkMetadata<'a> {
    source: String,
    spec: &'a ExperimentSpec,
    threads: Option<usize>,
    averaging: &'static str,
    seconds: f64,
    version: &'static str,
}

const AVERAGING: &str = "macro: TPR and FPR are computed per trial on the whole network and averaged over \
trials for each tuning value; trials without true edges enter the FPR average only; dis is taken of the averages";

pub fn benchmark(
    spec_path: Option<&Path>,
    preset_name: Option<&str>,
    seed: u64,
    trials: Option<usize>,
    threads: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    let (spec, source) = match (spec_path, preset_name) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let spec = ExperimentSpec::from_json(&text).with_context(|| format!("spec {}", path.display()))?;
            if trials.is_some() {
                warn!("--trials is ignored: the experiment file sets the trial count");
            }
            (spec, format!("spec {}", path.display()))
        }
        (None, Some(name)) => {
            let mut spec = preset(name, seed)?;
            if let Some(t) = trials {
                spec.trials = t;
            }
            spec.validate()?;
            (spec, format!("preset {name}"))
        }
        (None, None) => bail!("either --spec or --preset is required"),
    };
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| spec.output_dir.as_ref().map(Into::into))
        .unwrap_or_else(|| ".".into());
    let threads = threads.or_else(threads_from_env);
    info!(
        "{source}: {} condition(s), {} method(s), {} trials, master seed {}",
        spec.conditions.len(),
        spec.methods.len(),
        spec.trials,
        spec.master_seed
    );
    let start = Instant::now();
    let table = run_benchmark(&spec, threads)?;
    let seconds = start.elapsed().as_secs_f64();
    atomic_write(&out.join("results.csv"), |w| Ok(table.write_csv(w)?))?;
    write_json(
        &out.join("metadata.json"),
        &BenchmarkMetadata {
            source,
            spec: &spec,
            threads,
            averaging: AVERAGING,
            seconds,
            version: env!("CARGO_PKG_VERSION"),
        },
    )?;
    info!("{} rows written to {} in {seconds:.1}s", table.rows.len(), out.display());
    Ok(())
}

pub fn trace_dump(
    data_path: &Path,
    node: usize,
    order: usize,
    tau: f64,
    method: Method,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let data = read_data(data_path)?;
    if node >= data.nodes() {
        bail!("node {node} outside the {} nodes of the data", data.nodes());
    }
    let problem = build_miso(&data, node, order)?;
    let opts = EmOptions::default();
    let (eta, em) = full_graph_hypers(&problem, initial_sigma(seed), &opts).context("full-graph EM")?;
    let cfg = SearchConfig {
        tau,
        ..SearchConfig::default()
    };
    let (_, trace) = match method {
        Method::Bs => bs_search(&problem, &eta, &cfg)?,
        Method::BsIterEm => bs_search_iterative_em(&problem, &eta, &cfg)?,
        Method::Glasso | Method::Kglasso => bail!("trace-dump supports bs and bs-iter-em"),
    };
    atomic_write(&out.join("em_trace.csv"), |w| Ok(em.write_csv(w)?))?;
    atomic_write(&out.join("search_trace.jsonl"), |w| Ok(trace.write_jsonl(w)?))?;
    info!(
        "node {node}: {} EM iterations (converged: {}), {} search steps",
        em.iterations,
        em.converged,
        trace.steps.len()
    );
    Ok(())
}
