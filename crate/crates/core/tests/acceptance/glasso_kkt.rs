use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use nettop::glasso::{glasso_fit, kernel_glasso_fit, kkt_residual, GlassoConfig};
use nettop::kernel::{materialize, KernelBlock};
use nettop::MisoProblem;

use crate::common::{random_problem, rel, rng};

/// Accelerated proximal gradient for `1/2 |y - B x|^2 + delta sum |x_i|`.
fn fista(b: &DMatrix<f64>, y: &DVector<f64>, order: usize, delta: f64, iters: usize) -> DVector<f64> {
    let step = 1.0 / SymmetricEigen::new(b.transpose() * b).eigenvalues.max();
    let groups = b.ncols() / order;
    let mut x = DVector::zeros(b.ncols());
    let mut z = x.clone();
    let mut t: f64 = 1.0;
    for _ in 0..iters {
        let mut v = &z - b.transpose() * (b * &z - y) * step;
        for i in 0..groups {
            let blk = v.rows(i * order, order).into_owned();
            let norm = blk.norm();
            let keep = if norm > delta * step { 1.0 - delta * step / norm } else { 0.0 };
            v.rows_mut(i * order, order).copy_from(&(blk * keep));
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        z = &v + (&v - &x) * ((t - 1.0) / t_next);
        x = v;
        t = t_next;
    }
    x
}

/// Objective with the penalty `sum sqrt(theta_i^T W theta_i)`.
fn objective(p: &MisoProblem, theta: &DVector<f64>, delta: f64, weight: &DMatrix<f64>) -> f64 {
    let n = p.order();
    let r = p.y() - p.regressors() * theta;
    let pen: f64 = (0..p.nodes())
        .map(|i| {
            let t = theta.rows(i * n, n);
            t.dot(&(weight * t)).max(0.0).sqrt()
        })
        .sum();
    0.5 * r.norm_squared() + delta * pen
}

pub fn kkt_and_oracle() -> Result<String, String> {
    let mut r = rng(5);
    let (mut worst_kkt, mut worst_obj): (f64, f64) = (0.0, 0.0);
    for case in 0..20u64 {
        let nodes = r.random_range(2..=3);
        let order = r.random_range(2..=4);
        let p = random_problem(nodes, 40, order, 300 + case);
        let n = order;
        let max_corr = (0..nodes).map(|i| p.aty().rows(i * n, n).norm()).fold(0.0, f64::max);
        let delta = max_corr * r.random_range(0.05..0.9);
        let beta = r.random_range(0.2..0.9);
        let cfg = GlassoConfig { delta, beta, ..GlassoConfig::default() };

        let plain = glasso_fit(&p, &cfg).map_err(|e| e.to_string())?;
        let kern = kernel_glasso_fit(&p, &cfg).map_err(|e| e.to_string())?;
        worst_kkt = worst_kkt.max(kkt_residual(&p, &plain)).max(kkt_residual(&p, &kern));

        let eye = DMatrix::identity(n, n);
        let oracle = fista(p.regressors(), p.y(), n, delta, 30_000);
        worst_obj = worst_obj.max(rel(objective(&p, &plain.theta.coeffs, delta, &eye), objective(&p, &oracle, delta, &eye)));

        // kernel oracle: factor from a dense Cholesky of the materialized kernel
        let k = materialize(&KernelBlock::new(n, beta, 1.0).unwrap()).unwrap();
        let f = k.clone().cholesky().unwrap().l();
        let mut bf = DMatrix::zeros(p.samples(), n * nodes);
        for i in 0..nodes {
            bf.columns_mut(i * n, n).copy_from(&(p.block(i) * &f));
        }
        let phi = fista(&bf, p.y(), n, delta, 30_000);
        let mut theta = DVector::zeros(n * nodes);
        for i in 0..nodes {
            theta.rows_mut(i * n, n).copy_from(&(&f * phi.rows(i * n, n)));
        }
        let kinv = k.try_inverse().unwrap();
        worst_obj = worst_obj.max(rel(
            objective(&p, &kern.theta.coeffs, delta, &kinv),
            objective(&p, &theta, delta, &kinv),
        ));
    }
    let detail = format!("40 fits; max KKT residual {worst_kkt:.1e}, max rel objective gap {worst_obj:.1e}");
    if worst_kkt <= 1e-6 && worst_obj <= 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}
