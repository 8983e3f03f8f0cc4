use nalgebra::DMatrix;
use rand::Rng;

use nettop::bayes::{
    draw_initial_sigma, e_step, em_fit, m_step, q1, score_both_forms, EmOptions, HyperParams,
};
use nettop::kernel::{materialize, KernelBlock};
use nettop::Topology;

use crate::common::{dense_log_density, random_hypers, random_problem, rel, rng};

pub fn monotonicity() -> Result<String, String> {
    let mut r = rng(1);
    // the check below is the criterion, so let EM run past any decrease
    let opts = EmOptions {
        monotone_slack: f64::INFINITY,
        ..EmOptions::default()
    };
    let mut iterations = 0;
    for case in 0..50u64 {
        let nodes = 2 + (case as usize) % 5;
        let samples = if case % 2 == 0 { 50 } else { 500 };
        let order = if (case / 2) % 2 == 0 { 5 } else { 20 };
        let p = random_problem(nodes, samples, order, 100 + case);
        let all: Vec<usize> = (0..nodes).collect();
        let g = Topology::incoming(nodes, p.target(), &all).unwrap();
        let init = HyperParams::initial(draw_initial_sigma(&mut r), all).unwrap();
        let (_, trace) = em_fit(&p, &g, &init, &opts).map_err(|e| format!("case {case}: {e}"))?;
        iterations += trace.iterations;
        for (k, w) in trace.values.windows(2).enumerate() {
            if w[1] < w[0] - 1e-8 * (1.0 + w[0].abs()) {
                return Err(format!(
                    "case {case} (L={nodes}, N={samples}, n={order}): J fell from {} to {} at iteration {}",
                    w[0],
                    w[1],
                    k + 1
                ));
            }
        }
    }
    Ok(format!("50 instances, {iterations} EM iterations, no decrease"))
}

pub fn score_oracle() -> Result<String, String> {
    let mut r = rng(2);
    let mut worst_forms: f64 = 0.0;
    let mut worst_dense: f64 = 0.0;
    for case in 0..100u64 {
        let nodes = r.random_range(1..=4);
        let samples = r.random_range(20..=200);
        let order = r.random_range(2..=15);
        let p = random_problem(nodes, samples, order, 1000 + case);
        let modules: Vec<usize> = (0..nodes).filter(|_| r.random_bool(0.7)).collect();
        let g = Topology::incoming(nodes, p.target(), &modules).unwrap();
        let eta = random_hypers(&mut r, modules);
        let (gamma_form, lemma_form) = score_both_forms(&p, &g, &eta).map_err(|e| e.to_string())?;
        // J is twice the log-density without the N log(2 pi) term
        let dense = 2.0 * dense_log_density(&p, &eta)
            + samples as f64 * (2.0 * std::f64::consts::PI).ln();
        worst_forms = worst_forms.max(rel(gamma_form, lemma_form));
        worst_dense = worst_dense.max(rel(gamma_form, dense)).max(rel(lemma_form, dense));
    }
    let detail = format!("max rel gap between forms {worst_forms:.2e}, to dense density {worst_dense:.2e}");
    if worst_forms <= 1e-6 && worst_dense <= 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Maximizes a unimodal-on-grid function by repeated grid refinement
/// around the best point.
fn zoom_max(f: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64, points: usize, rounds: usize) -> f64 {
    let mut best = lo;
    for _ in 0..rounds {
        let step = (hi - lo) / (points - 1) as f64;
        let mut best_val = f64::NEG_INFINITY;
        for k in 0..points {
            let x = lo + step * k as f64;
            let v = f(x);
            if v > best_val {
                best_val = v;
                best = x;
            }
        }
        lo = best - 2.0 * step;
        hi = best + 2.0 * step;
    }
    best
}

struct DenseTc {
    trace: f64,
    log_det: f64,
}

/// `tr(Kbar^-1 Delta)` and `log det Kbar` with an explicit kernel and LU.
fn dense_tc(beta: f64, delta: &DMatrix<f64>) -> DenseTc {
    let n = delta.nrows();
    let k = materialize(&KernelBlock::new(n, beta, 1.0).unwrap()).unwrap();
    let lu = k.lu();
    let trace = lu.solve(delta).unwrap().trace();
    let log_det = lu.u().diagonal().iter().map(|v| v.abs().ln()).sum();
    DenseTc { trace, log_det }
}

fn q2_dense(lambda: f64, tc: &DenseTc, n: usize) -> f64 {
    -0.5 * (n as f64 * lambda.ln() + tc.log_det) - 0.5 * tc.trace / lambda
}

pub fn update_rules() -> Result<String, String> {
    let mut r = rng(3);
    let (mut worst_sigma, mut worst_lambda, mut worst_beta): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut blocks = 0;
    for case in 0..8u64 {
        let nodes = 3;
        let order = 10;
        let p = random_problem(nodes, 200, order, 5000 + case);
        let eta = random_hypers(&mut r, (0..nodes).collect());
        let estep = e_step(&p, &eta).map_err(|e| e.to_string())?;
        let (next, _) = m_step(&estep, &eta).map_err(|e| e.to_string())?;

        // sigma: brute-force Q1 on ln(sigma)
        let ln_sigma = zoom_max(&|s: f64| q1(s.exp(), &estep), -5.0, 3.0, 801, 8);
        worst_sigma = worst_sigma.max(rel(next.sigma, ln_sigma.exp()));

        for (slot, delta) in estep.delta_blocks.iter().enumerate() {
            blocks += 1;
            // lambda at the returned beta
            let tc = dense_tc(next.beta[slot], delta);
            let ln_lambda = zoom_max(&|l: f64| q2_dense(l.exp(), &tc, order), -20.0, 10.0, 801, 8);
            worst_lambda = worst_lambda.max(rel(next.lambda[slot], ln_lambda.exp()));

            // beta: profile out lambda on a grid for each beta on a grid
            let profile = |b: f64| {
                let tc = dense_tc(b, delta);
                let ln_l = zoom_max(&|l: f64| q2_dense(l.exp(), &tc, order), -20.0, 10.0, 121, 5);
                q2_dense(ln_l.exp(), &tc, order)
            };
            let beta = zoom_max(&profile, 1e-6, 0.999, 200, 4);
            worst_beta = worst_beta.max((next.beta[slot] - beta).abs());
        }
    }
    let detail = format!(
        "{blocks} kernel blocks; max rel err sigma {worst_sigma:.1e}, lambda {worst_lambda:.1e}; max abs err beta {worst_beta:.1e}"
    );
    if worst_sigma <= 1e-4 && worst_lambda <= 1e-4 && worst_beta <= 1e-3 {
        Ok(detail)
    } else {
        Err(detail)
    }
}
