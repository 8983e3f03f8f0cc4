//! Networks of rational transfer operators: representation, simulation,
//! random generation and structural validity checks.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};

use nalgebra::{Complex, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Taps used when a finite impulse-response horizon is needed.
pub const IMPULSE_TAPS: usize = 1000;

/// Largest pole/zero modulus drawn by [`generate_random`].
pub const MAX_ROOT_MODULUS: f64 = 0.95;

/// Points on `[0, pi]` at which `det(I - G(e^{iw}))` is inspected.
pub const FREQUENCY_GRID: usize = 512;

const DET_FLOOR: f64 = 1e-6;
const DIVERGENCE_FACTOR: f64 = 1e10;
const DEFAULT_REJECTION_BUDGET: usize = 1000;

/// Discrete-time rational filter `num(q^-1) / den(q^-1)`.
///
/// Coefficients are stored in ascending powers of `q^-1`; `den[0]` is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationalTransfer {
    pub num: Vec<f64>,
    pub den: Vec<f64>,
}

impl RationalTransfer {
    pub fn new(num: Vec<f64>, den: Vec<f64>) -> Result<Self> {
        if den.is_empty() || den[0] != 1.0 {
            return Err(Error::InvalidInput(
                "denominator must be non-empty with den[0] = 1".into(),
            ));
        }
        if num.iter().chain(den.iter()).any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("non-finite filter coefficient".into()));
        }
        Ok(Self { num, den })
    }

    /// The identity filter.
    pub fn unit() -> Self {
        Self {
            num: vec![1.0],
            den: vec![1.0],
        }
    }

    /// `gain * q^-delay`.
    pub fn delay(delay: usize, gain: f64) -> Self {
        let mut num = vec![0.0; delay + 1];
        num[delay] = gain;
        Self {
            num,
            den: vec![1.0],
        }
    }

    /// Largest of the numerator and denominator degrees.
    pub fn order(&self) -> usize {
        self.num.len().max(self.den.len()).saturating_sub(1)
    }

    pub fn is_monic_denominator(&self) -> bool {
        self.den.first() == Some(&1.0)
    }

    pub fn is_monic_numerator(&self) -> bool {
        self.num.first() == Some(&1.0)
    }

    pub fn is_strictly_proper(&self) -> bool {
        self.num.first().is_none_or(|&c| c == 0.0)
    }

    pub fn is_stable(&self) -> bool {
        roots_inside_unit_disc(&self.den)
    }

    /// Numerator roots strictly inside the unit disc. Requires `num[0] != 0`.
    pub fn is_minimum_phase(&self) -> bool {
        match self.num.first() {
            Some(&c) if c != 0.0 => roots_inside_unit_disc(&self.num),
            _ => false,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.num.iter().chain(self.den.iter()).all(|c| c.is_finite())
    }

    /// Runs the filter over `input` from rest.
    pub fn filter(&self, input: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; input.len()];
        for t in 0..input.len() {
            let mut acc = 0.0;
            for (k, &b) in self.num.iter().enumerate().take(t + 1) {
                acc += b * input[t - k];
            }
            for (k, &a) in self.den.iter().enumerate().skip(1).take(t) {
                acc -= a * out[t - k];
            }
            out[t] = acc;
        }
        out
    }

    pub fn impulse_response(&self, taps: usize) -> Vec<f64> {
        let mut impulse = vec![0.0; taps];
        if taps > 0 {
            impulse[0] = 1.0;
        }
        self.filter(&impulse)
    }

    /// Euclidean norm of the impulse response truncated at `taps`.
    pub fn l2_norm(&self, taps: usize) -> f64 {
        self.impulse_response(taps)
            .iter()
            .map(|h| h * h)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            num: self.num.iter().map(|c| c * gain).collect(),
            den: self.den.clone(),
        }
    }

    /// Frequency response at `e^{i omega}`.
    pub fn frequency_response(&self, omega: f64) -> Complex<f64> {
        let eval = |coeffs: &[f64]| {
            coeffs
                .iter()
                .enumerate()
                .fold(Complex::new(0.0, 0.0), |acc, (k, &c)| {
                    acc + Complex::from_polar(c, -omega * k as f64)
                })
        };
        eval(&self.num) / eval(&self.den)
    }
}

/// Schur-Cohn step-down test on `c0 + c1 x^-1 + ... + cd x^-d`: true iff
/// every root in `x` lies strictly inside the unit circle.
pub fn roots_inside_unit_disc(coeffs: &[f64]) -> bool {
    let Some(&lead) = coeffs.first() else {
        return false;
    };
    if lead == 0.0 || !lead.is_finite() {
        return false;
    }
    let mut a: Vec<f64> = coeffs.iter().map(|c| c / lead).collect();
    while a.len() > 1 && a[a.len() - 1] == 0.0 {
        a.pop();
    }
    while a.len() > 1 {
        let d = a.len() - 1;
        let k = a[d];
        if !k.is_finite() || k.abs() >= 1.0 {
            return false;
        }
        let denom = 1.0 - k * k;
        let next: Vec<f64> = (0..d).map(|i| (a[i] - k * a[d - i]) / denom).collect();
        a = next;
    }
    true
}

/// Set of directed edges `(source, target)`, i.e. `w_source -> w_target`.
///
/// A network topology never contains self-loops; a predictor topology may,
/// where the self-loop on node `j` stands for the noise-whitening term.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Topology {
    nodes: usize,
    self_loops: bool,
    edges: BTreeSet<(usize, usize)>,
}

impl Topology {
    pub fn network(nodes: usize) -> Self {
        Self {
            nodes,
            self_loops: false,
            edges: BTreeSet::new(),
        }
    }

    pub fn predictor(nodes: usize) -> Self {
        Self {
            nodes,
            self_loops: true,
            edges: BTreeSet::new(),
        }
    }

    /// Predictor topology holding the edges `source -> target` for every
    /// listed source.
    pub fn incoming(nodes: usize, target: usize, sources: &[usize]) -> Result<Self> {
        let mut g = Self::predictor(nodes);
        for &s in sources {
            g.insert(s, target)?;
        }
        Ok(g)
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn allows_self_loops(&self) -> bool {
        self.self_loops
    }

    /// Adds an edge; returns whether it was new.
    pub fn insert(&mut self, source: usize, target: usize) -> Result<bool> {
        if source >= self.nodes || target >= self.nodes {
            return Err(Error::InvalidInput(format!(
                "edge ({source}, {target}) outside {} nodes",
                self.nodes
            )));
        }
        if source == target && !self.self_loops {
            return Err(Error::InvalidInput(format!(
                "self-loop ({source}, {target}) in a network topology"
            )));
        }
        Ok(self.edges.insert((source, target)))
    }

    pub fn remove(&mut self, source: usize, target: usize) -> bool {
        self.edges.remove(&(source, target))
    }

    pub fn contains(&self, source: usize, target: usize) -> bool {
        self.edges.contains(&(source, target))
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    /// Sources of edges entering `target`, ascending.
    pub fn sources_of(&self, target: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|&&(_, t)| t == target)
            .map(|&(s, _)| s)
            .collect()
    }

    /// Drops self-loops and returns a network topology.
    pub fn without_self_loops(&self) -> Self {
        Self {
            nodes: self.nodes,
            self_loops: false,
            edges: self.edges.iter().filter(|(s, t)| s != t).copied().collect(),
        }
    }

    /// Union of the edge sets; the result allows self-loops if either does.
    pub fn union(&self, other: &Self) -> Self {
        Self {
            nodes: self.nodes.max(other.nodes),
            self_loops: self.self_loops || other.self_loops,
            edges: self.edges.union(&other.edges).copied().collect(),
        }
    }
}

/// The network `w = G w + H e` with diagonal `H` and no self-modules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "SystemDocument", try_from = "SystemDocument")]
pub struct NetworkSystem {
    nodes: usize,
    /// Row-major `nodes x nodes`; entry `target * nodes + source` is `G_target,source`.
    modules: Vec<Option<RationalTransfer>>,
    noise_models: Vec<RationalTransfer>,
    sigma: Vec<f64>,
    seed: Option<u64>,
}

impl NetworkSystem {
    /// A network without modules.
    pub fn new(noise_models: Vec<RationalTransfer>, sigma: Vec<f64>) -> Result<Self> {
        let nodes = noise_models.len();
        if nodes == 0 {
            return Err(Error::InvalidInput("network needs at least one node".into()));
        }
        if sigma.len() != nodes {
            return Err(Error::InvalidInput(format!(
                "{} noise models but {} noise levels",
                nodes,
                sigma.len()
            )));
        }
        Ok(Self {
            nodes,
            modules: vec![None; nodes * nodes],
            noise_models,
            sigma,
            seed: None,
        })
    }

    /// `nodes` independent unit-variance white noise sources.
    pub fn white(nodes: usize) -> Result<Self> {
        Self::new(vec![RationalTransfer::unit(); nodes], vec![1.0; nodes])
    }

    pub fn set_module(&mut self, target: usize, source: usize, g: RationalTransfer) -> Result<()> {
        if target >= self.nodes || source >= self.nodes {
            return Err(Error::InvalidInput(format!(
                "module ({target}, {source}) outside {} nodes",
                self.nodes
            )));
        }
        if target == source {
            return Err(Error::InvalidInput(format!(
                "module G_{target}{source} lies on the diagonal"
            )));
        }
        self.modules[target * self.nodes + source] = Some(g);
        Ok(())
    }

    pub fn clear_module(&mut self, target: usize, source: usize) {
        if target < self.nodes && source < self.nodes {
            self.modules[target * self.nodes + source] = None;
        }
    }

    pub fn module(&self, target: usize, source: usize) -> Option<&RationalTransfer> {
        self.modules
            .get(target * self.nodes + source)
            .and_then(Option::as_ref)
    }

    /// Present modules as `(target, source, G)`, row-major.
    pub fn modules(&self) -> impl Iterator<Item = (usize, usize, &RationalTransfer)> + '_ {
        self.modules.iter().enumerate().filter_map(move |(idx, g)| {
            g.as_ref().map(|g| (idx / self.nodes, idx % self.nodes, g))
        })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn noise_model(&self, node: usize) -> &RationalTransfer {
        &self.noise_models[node]
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    fn total_order(&self) -> usize {
        self.modules().map(|(_, _, g)| g.order()).sum::<usize>()
            + self.noise_models.iter().map(|h| h.order()).sum::<usize>()
    }
}

#[derive(Serialize, Deserialize)]
struct ModuleEntry {
    target: usize,
    source: usize,
    num: Vec<f64>,
    den: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SystemDocument {
    nodes: usize,
    modules: Vec<ModuleEntry>,
    noise_models: Vec<RationalTransfer>,
    sigma: Vec<f64>,
    seed: Option<u64>,
}

impl From<NetworkSystem> for SystemDocument {
    fn from(sys: NetworkSystem) -> Self {
        let modules = sys
            .modules()
            .map(|(target, source, g)| ModuleEntry {
                target,
                source,
                num: g.num.clone(),
                den: g.den.clone(),
            })
            .collect();
        SystemDocument {
            nodes: sys.nodes,
            modules,
            noise_models: sys.noise_models,
            sigma: sys.sigma,
            seed: sys.seed,
        }
    }
}

impl TryFrom<SystemDocument> for NetworkSystem {
    type Error = Error;

    fn try_from(doc: SystemDocument) -> Result<Self> {
        if doc.noise_models.len() != doc.nodes {
            return Err(Error::InvalidInput(format!(
                "document declares {} nodes but has {} noise models",
                doc.nodes,
                doc.noise_models.len()
            )));
        }
        let mut sys = NetworkSystem::new(doc.noise_models, doc.sigma)?;
        for m in doc.modules {
            sys.set_module(m.target, m.source, RationalTransfer::new(m.num, m.den)?)?;
        }
        sys.seed = doc.seed;
        Ok(sys)
    }
}

/// Measured node signals, one column per node.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    w: DMatrix<f64>,
    seed: Option<u64>,
}

impl DataSet {
    pub fn new(w: DMatrix<f64>, seed: Option<u64>) -> Result<Self> {
        if w.nrows() == 0 || w.ncols() == 0 {
            return Err(Error::InvalidInput("data set needs N >= 1 and L >= 1".into()));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("data set contains non-finite entries".into()));
        }
        Ok(Self { w, seed })
    }

    /// `N x L` measurement matrix.
    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn samples(&self) -> usize {
        self.w.nrows()
    }

    pub fn nodes(&self) -> usize {
        self.w.ncols()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn column(&self, node: usize) -> Vec<f64> {
        self.w.column(node).iter().copied().collect()
    }

    /// Writes a CSV with header `w1,...,wL` and full-precision values.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record((1..=self.nodes()).map(|j| format!("w{j}")))?;
        for row in self.w.row_iter() {
            writer.write_record(row.iter().map(|v| format!("{v:e}")))?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let nodes = reader.headers()?.len();
        let mut values = Vec::new();
        let mut rows = 0;
        for record in reader.records() {
            let record = record?;
            if record.len() != nodes {
                return Err(Error::InvalidInput(format!(
                    "row {} has {} fields, expected {nodes}",
                    rows + 1,
                    record.len()
                )));
            }
            for field in record.iter() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::InvalidInput(format!("row {}: cannot parse {field:?}", rows + 1))
                })?;
                values.push(v);
            }
            rows += 1;
        }
        Self::new(DMatrix::from_row_slice(rows, nodes, &values), None)
    }
}

/// A violated modelling assumption reported by [`check_validity`].
#[derive(Debug, Clone, PartialEq)]
pub enum Diagnostic {
    NonFiniteCoefficients { target: usize, source: Option<usize> },
    NonMonicDenominator { target: usize, source: Option<usize> },
    NotStrictlyProper { target: usize, source: usize },
    UnstableModule { target: usize, source: usize },
    NonMonicNoiseModel { node: usize },
    UnstableNoiseModel { node: usize },
    NotMinimumPhase { node: usize },
    NonPositiveSigma { node: usize },
    ClosedLoopSingular { omega: f64, det: f64 },
    ClosedLoopUnstable,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let filter = |t: &usize, s: &Option<usize>| match s {
            Some(s) => format!("G_{t},{s}"),
            None => format!("H_{t}"),
        };
        match self {
            Diagnostic::NonFiniteCoefficients { target, source } => {
                write!(f, "{} has non-finite coefficients", filter(target, source))
            }
            Diagnostic::NonMonicDenominator { target, source } => {
                write!(f, "{} denominator is not monic", filter(target, source))
            }
            Diagnostic::NotStrictlyProper { target, source } => {
                write!(f, "G_{target},{source} is not strictly proper")
            }
            Diagnostic::UnstableModule { target, source } => {
                write!(f, "G_{target},{source} has a pole on or outside the unit circle")
            }
            Diagnostic::NonMonicNoiseModel { node } => write!(f, "H_{node} is not monic"),
            Diagnostic::UnstableNoiseModel { node } => {
                write!(f, "H_{node} has a pole on or outside the unit circle")
            }
            Diagnostic::NotMinimumPhase { node } => {
                write!(f, "H_{node} has a zero on or outside the unit circle")
            }
            Diagnostic::NonPositiveSigma { node } => write!(f, "sigma_{node} is not positive"),
            Diagnostic::ClosedLoopSingular { omega, det } => {
                write!(f, "|det(I - G)| = {det:e} at omega = {omega}")
            }
            Diagnostic::ClosedLoopUnstable => write!(f, "closed loop (I - G)^-1 is unstable"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Validity {
    pub diagnostics: Vec<Diagnostic>,
}

impl Validity {
    pub fn is_valid(&self) -> bool {
        self.diagnostics.is_empty()
    }
}

fn structural_diagnostics(system: &NetworkSystem) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    for (target, source, g) in system.modules() {
        if !g.is_finite() {
            out.push(Diagnostic::NonFiniteCoefficients {
                target,
                source: Some(source),
            });
            continue;
        }
        if !g.is_monic_denominator() {
            out.push(Diagnostic::NonMonicDenominator {
                target,
                source: Some(source),
            });
        }
        if !g.is_strictly_proper() {
            out.push(Diagnostic::NotStrictlyProper { target, source });
        }
        if !g.is_stable() {
            out.push(Diagnostic::UnstableModule { target, source });
        }
    }
    for (node, h) in system.noise_models.iter().enumerate() {
        if !h.is_finite() {
            out.push(Diagnostic::NonFiniteCoefficients {
                target: node,
                source: None,
            });
            continue;
        }
        if !h.is_monic_denominator() {
            out.push(Diagnostic::NonMonicDenominator {
                target: node,
                source: None,
            });
        }
        if !h.is_monic_numerator() {
            out.push(Diagnostic::NonMonicNoiseModel { node });
        }
        if !h.is_stable() {
            out.push(Diagnostic::UnstableNoiseModel { node });
        }
        if !h.is_minimum_phase() {
            out.push(Diagnostic::NotMinimumPhase { node });
        }
    }
    for (node, &s) in system.sigma.iter().enumerate() {
        if !(s > 0.0 && s.is_finite()) {
            out.push(Diagnostic::NonPositiveSigma { node });
        }
    }
    out
}

/// Smallest `|det(I - G(e^{iw}))|` over the frequency grid, with its frequency.
pub fn min_return_difference(system: &NetworkSystem) -> (f64, f64) {
    let l = system.nodes;
    let mut worst = (f64::INFINITY, 0.0);
    for k in 0..FREQUENCY_GRID {
        let omega = std::f64::consts::PI * k as f64 / (FREQUENCY_GRID - 1) as f64;
        let mut m = DMatrix::<Complex<f64>>::identity(l, l);
        for (t, s, g) in system.modules() {
            m[(t, s)] -= g.frequency_response(omega);
        }
        let det = m.determinant().norm();
        if det < worst.0 {
            worst = (det, omega);
        }
    }
    worst
}

/// Horizon of the zero-input decay test.
pub fn decay_horizon(system: &NetworkSystem) -> usize {
    (10 * system.total_order()).max(2000)
}

/// Zero-input response from unit initial outputs; true iff it stays finite
/// and its tail (last tenth of the horizon) falls below `1e-3` of its peak.
pub fn zero_input_decays(system: &NetworkSystem) -> bool {
    let steps = decay_horizon(system);
    let l = system.nodes;
    let mut drive = vec![vec![0.0; steps]; l];
    for d in drive.iter_mut() {
        d[0] = 1.0;
    }
    let Ok(w) = propagate(system, &drive, f64::INFINITY) else {
        return false;
    };
    let tail_start = steps - steps / 10;
    let mut peak: f64 = 0.0;
    let mut tail: f64 = 0.0;
    for col in &w {
        for (t, v) in col.iter().enumerate() {
            if !v.is_finite() {
                return false;
            }
            peak = peak.max(v.abs());
            if t >= tail_start {
                tail = tail.max(v.abs());
            }
        }
    }
    tail <= 1e-3 * peak
}

/// True iff every modelling assumption holds and the closed loop is stable.
pub fn check_validity(system: &NetworkSystem) -> Validity {
    let mut diagnostics = structural_diagnostics(system);
    if diagnostics.is_empty() {
        let (det, omega) = min_return_difference(system);
        if !(det > DET_FLOOR) {
            diagnostics.push(Diagnostic::ClosedLoopSingular { omega, det });
        }
        if !zero_input_decays(system) {
            diagnostics.push(Diagnostic::ClosedLoopUnstable);
        }
    }
    Validity { diagnostics }
}

/// Time-domain recursion `w_j(t) = sum_i (G_ji w_i)(t) + drive_j(t)` from
/// rest. Strict properness of `G` makes the recursion explicit.
fn propagate(system: &NetworkSystem, drive: &[Vec<f64>], limit: f64) -> Result<Vec<Vec<f64>>> {
    let l = system.nodes;
    let steps = drive.first().map_or(0, Vec::len);
    let modules: Vec<(usize, usize, &RationalTransfer)> = system.modules().collect();
    let mut outputs = vec![vec![0.0; steps]; modules.len()];
    let mut w = vec![vec![0.0; steps]; l];
    for t in 0..steps {
        for (m, &(_, source, g)) in modules.iter().enumerate() {
            let input = &w[source];
            let hist = &outputs[m];
            let mut acc = 0.0;
            for (k, &b) in g.num.iter().enumerate().skip(1).take(t) {
                acc += b * input[t - k];
            }
            for (k, &a) in g.den.iter().enumerate().skip(1).take(t) {
                acc -= a * hist[t - k];
            }
            outputs[m][t] = acc;
        }
        for (j, col) in w.iter_mut().enumerate() {
            col[t] = drive[j][t];
        }
        for (m, &(target, _, _)) in modules.iter().enumerate() {
            w[target][t] += outputs[m][t];
        }
        for (j, col) in w.iter().enumerate() {
            if !col[t].is_finite() || col[t].abs() > limit {
                return Err(Error::SimulationDiverged { node: j, time: t });
            }
        }
    }
    Ok(w)
}

/// Simulates `N` samples of `w = (I - G)^-1 H e` from rest with
/// `e_j(t) ~ N(0, sigma_j^2)` i.i.d.
///
/// Noise is drawn time-major (`e_1(1), ..., e_L(1), e_1(2), ...`) from a
/// ChaCha8 stream seeded with `seed`. Only structural assumptions are
/// checked up front; an unstable closed loop surfaces as
/// [`Error::SimulationDiverged`] once the output exceeds `1e10 * max sigma`.
pub fn simulate(system: &NetworkSystem, samples: usize, seed: u64) -> Result<DataSet> {
    if samples == 0 {
        return Err(Error::InvalidInput("sample count must be >= 1".into()));
    }
    let structural = structural_diagnostics(system);
    if let Some(first) = structural.first() {
        return Err(Error::InvalidInput(format!("invalid system: {first}")));
    }
    let l = system.nodes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = vec![vec![0.0; samples]; l];
    for t in 0..samples {
        for (j, e) in noise.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            e[t] = system.sigma[j] * z;
        }
    }
    let drive: Vec<Vec<f64>> = noise
        .iter()
        .zip(&system.noise_models)
        .map(|(e, h)| h.filter(e))
        .collect();
    let max_sigma = system.sigma.iter().copied().fold(0.0, f64::max);
    let w = propagate(system, &drive, DIVERGENCE_FACTOR * max_sigma.max(1.0))?;
    let matrix = DMatrix::from_fn(samples, l, |t, j| w[j][t]);
    DataSet::new(matrix, Some(seed))
}

/// Closed-loop impulse responses from `e_source` to every node, truncated at
/// `taps`: entry `[target][source]` holds the sequence.
pub fn closed_loop_impulse(system: &NetworkSystem, taps: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let l = system.nodes;
    let mut out = vec![vec![Vec::new(); l]; l];
    for source in 0..l {
        let mut drive = vec![vec![0.0; taps]; l];
        drive[source] = system.noise_models[source].impulse_response(taps);
        let w = propagate(system, &drive, f64::INFINITY)?;
        for (target, col) in w.into_iter().enumerate() {
            out[target][source] = col;
        }
    }
    Ok(out)
}

/// Network topology of the present modules.
pub fn true_topology(system: &NetworkSystem) -> Topology {
    let mut g = Topology::network(system.nodes);
    for (target, source, _) in system.modules() {
        g.edges.insert((source, target));
    }
    g
}

/// Options for [`generate_random`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorOptions {
    pub min_order: usize,
    pub max_order: usize,
    pub max_attempts: usize,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        Self {
            min_order: 2,
            max_order: 5,
            max_attempts: DEFAULT_REJECTION_BUDGET,
        }
    }
}

/// Monic polynomial in `q^-1` of the given degree with random real roots and
/// conjugate pairs of modulus at most [`MAX_ROOT_MODULUS`].
fn random_monic_poly<R: Rng>(rng: &mut R, degree: usize) -> Vec<f64> {
    let mut poly = vec![1.0];
    let mut remaining = degree;
    while remaining > 0 {
        let r = rng.random::<f64>() * MAX_ROOT_MODULUS;
        let factor = if remaining >= 2 && rng.random_bool(0.5) {
            remaining -= 2;
            let angle = rng.random::<f64>() * std::f64::consts::PI;
            vec![1.0, -2.0 * r * angle.cos(), r * r]
        } else {
            remaining -= 1;
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            vec![1.0, -sign * r]
        };
        poly = poly_mul(&poly, &factor);
    }
    poly
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (k, &y) in b.iter().enumerate() {
            out[i + k] += x * y;
        }
    }
    out
}

/// Random strictly proper module of the given order with unit impulse
/// response energy over [`IMPULSE_TAPS`].
pub fn random_module<R: Rng>(rng: &mut R, order: usize) -> RationalTransfer {
    let den = random_monic_poly(rng, order);
    let zeros = random_monic_poly(rng, order.saturating_sub(1));
    let mut num = Vec::with_capacity(zeros.len() + 1);
    num.push(0.0);
    num.extend(zeros);
    let g = RationalTransfer { num, den };
    let norm = g.l2_norm(IMPULSE_TAPS);
    g.scaled(1.0 / norm)
}

/// Random monic, stable, minimum-phase noise model of the given order.
pub fn random_noise_model<R: Rng>(rng: &mut R, order: usize) -> RationalTransfer {
    RationalTransfer {
        num: random_monic_poly(rng, order),
        den: random_monic_poly(rng, order),
    }
}

/// Network topology with each off-diagonal edge present independently
/// with probability `edge_prob`.
pub fn draw_topology<R: Rng>(rng: &mut R, nodes: usize, edge_prob: f64) -> Topology {
    let mut g = Topology::network(nodes);
    for target in 0..nodes {
        for source in 0..nodes {
            if source != target && rng.random::<f64>() < edge_prob {
                g.insert(source, target).expect("edge within range");
            }
        }
    }
    g
}

/// Draws a random benchmark network.
///
/// Each attempt draws a topology with [`draw_topology`] and fresh module and
/// noise dynamics; attempts repeat until [`check_validity`] accepts the
/// system. Unit-energy modules make most feedback loops unstable, so the
/// accepted topologies are sparser than the Bernoulli proposal.
pub fn generate_random(
    nodes: usize,
    edge_prob: f64,
    opts: GeneratorOptions,
    seed: u64,
) -> Result<NetworkSystem> {
    if !(0.0..=1.0).contains(&edge_prob) {
        return Err(Error::InvalidInput(format!(
            "edge probability {edge_prob} outside [0, 1]"
        )));
    }
    if nodes == 0 || opts.min_order == 0 || opts.min_order > opts.max_order {
        return Err(Error::InvalidInput(format!(
            "need nodes >= 1 and 1 <= min_order <= max_order, got {nodes}, [{}, {}]",
            opts.min_order, opts.max_order
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..opts.max_attempts {
        let topology = draw_topology(&mut rng, nodes, edge_prob);
        let mut noise_models = Vec::with_capacity(nodes);
        for _ in 0..nodes {
            let order = rng.random_range(opts.min_order..=opts.max_order);
            noise_models.push(random_noise_model(&mut rng, order));
        }
        let mut sys = NetworkSystem::new(noise_models, vec![1.0; nodes])?;
        for (source, target) in topology.edges() {
            let order = rng.random_range(opts.min_order..=opts.max_order);
            sys.set_module(target, source, random_module(&mut rng, order))?;
        }
        if check_validity(&sys).is_valid() {
            return Ok(sys.with_seed(seed));
        }
    }
    Err(Error::GenerationFailed {
        attempts: opts.max_attempts,
    })
}
