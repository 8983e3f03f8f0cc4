use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nettop::kernel::{materialize, KernelBlock};
use nettop::model::{
    generate_random, random_module, random_noise_model, simulate, GeneratorOptions, NetworkSystem,
};
use nettop::predictor::build_miso;
use nettop::{bayes::HyperParams, DataSet, MisoProblem};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Simulated data from a random network; reseeds the generator until a
/// valid system is found.
pub fn random_network_data(nodes: usize, samples: usize, seed: u64) -> DataSet {
    let sys = generate_random(nodes, 0.5, GeneratorOptions::default(), seed).expect("system");
    simulate(&sys, samples, seed.wrapping_add(1)).expect("simulation")
}

/// Random MISO problem on a random network.
pub fn random_problem(nodes: usize, samples: usize, order: usize, seed: u64) -> MisoProblem {
    let data = random_network_data(nodes, samples, seed);
    let target = (seed as usize) % nodes;
    build_miso(&data, target, order).expect("problem")
}

/// Random hyperparameters covering `modules`.
pub fn random_hypers(rng: &mut ChaCha8Rng, modules: Vec<usize>) -> HyperParams {
    let p = modules.len();
    let lambda = (0..p).map(|_| rng.random_range(0.05..3.0)).collect();
    let beta = (0..p).map(|_| rng.random_range(0.1..0.95)).collect();
    HyperParams::new(rng.random_range(0.3..2.0), modules, lambda, beta).expect("hypers")
}

/// Three-node network with the single edge `source -> target`, random
/// module and noise dynamics.
pub fn planted_edge(source: usize, target: usize, seed: u64) -> NetworkSystem {
    let mut r = rng(seed);
    let noise = (0..3)
        .map(|_| {
            let order = r.random_range(1..=3);
            random_noise_model(&mut r, order)
        })
        .collect();
    let mut sys = NetworkSystem::new(noise, vec![1.0; 3]).expect("system");
    let order = r.random_range(2..=4);
    sys.set_module(target, source, random_module(&mut r, order))
        .expect("module");
    sys
}

/// Dense prior covariance for `eta`.
pub fn dense_prior(eta: &HyperParams, order: usize) -> DMatrix<f64> {
    let p = eta.modules.len();
    let mut k = DMatrix::zeros(order * p, order * p);
    for a in 0..p {
        let block = KernelBlock::new(order, eta.beta[a], eta.lambda[a]).expect("block");
        k.view_mut((a * order, a * order), (order, order))
            .copy_from(&materialize(&block).expect("kernel"));
    }
    k
}

/// Gaussian log-density of `y ~ N(0, sigma^2 I + A K A^T)` by LU.
pub fn dense_log_density(problem: &MisoProblem, eta: &HyperParams) -> f64 {
    let a = problem.restrict_modules(&eta.modules);
    let k = dense_prior(eta, problem.order());
    let n = problem.samples();
    let gamma = DMatrix::identity(n, n) * eta.sigma.powi(2) + &a * k * a.transpose();
    let lu = gamma.lu();
    let x: DVector<f64> = lu.solve(problem.y()).expect("solve");
    let log_det: f64 = lu.u().diagonal().iter().map(|v| v.abs().ln()).sum();
    -0.5 * problem.y().dot(&x) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}
