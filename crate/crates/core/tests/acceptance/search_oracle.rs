use nettop::bayes::{score, EmOptions, HyperParams};
use nettop::model::simulate;
use nettop::predictor::build_miso;
use nettop::search::{bs_search, full_graph_hypers, SearchConfig};
use nettop::{MisoProblem, Topology};

use crate::common::planted_edge;

const NODES: usize = 3;
const ORDER: usize = 20;

fn subset_score(p: &MisoProblem, eta: &HyperParams, mask: usize) -> f64 {
    let sources: Vec<usize> = (0..NODES).filter(|i| mask & (1 << i) != 0).collect();
    let g = Topology::incoming(NODES, p.target(), &sources).unwrap();
    score(p, &g, eta).expect("score")
}

pub fn greedy_vs_exhaustive() -> Result<String, String> {
    let seeds = 20;
    let mut optimal_seeds = 0;
    let mut not_local = Vec::new();
    for seed in 0..seeds as u64 {
        let source = (seed % 3) as usize;
        let target = (source + 1 + (seed / 3 % 2) as usize) % 3;
        let sys = planted_edge(source, target, 40 + seed);
        let data = simulate(&sys, 2000, 7000 + seed).map_err(|e| e.to_string())?;
        let mut all_optimal = true;
        for j in 0..NODES {
            let p = build_miso(&data, j, ORDER).map_err(|e| e.to_string())?;
            let (eta, _) = full_graph_hypers(&p, 1.0, &EmOptions::default()).map_err(|e| e.to_string())?;
            let (g, trace) = bs_search(&p, &eta, &SearchConfig::default()).map_err(|e| e.to_string())?;
            let found: usize = g.sources_of(j).iter().map(|i| 1 << i).sum();
            let scores: Vec<f64> = (0..1 << NODES).map(|m| subset_score(&p, &eta, m)).collect();
            let best = (0..1 << NODES)
                .max_by(|&a, &b| scores[a].total_cmp(&scores[b]))
                .unwrap();
            if scores[found] < scores[best] {
                all_optimal = false;
            }
            let j_found = scores[found];
            debug_assert!((j_found - trace.score).abs() <= 1e-9 * j_found.abs());
            for i in 0..NODES {
                if scores[found ^ (1 << i)] - j_found > 0.0 {
                    not_local.push(format!("seed {seed} node {j} move {i}"));
                }
            }
        }
        if all_optimal {
            optimal_seeds += 1;
        }
    }
    let detail = format!(
        "globally optimal on {optimal_seeds}/{seeds} seeds (all nodes); {} non-local results",
        not_local.len()
    );
    if optimal_seeds * 10 >= seeds * 9 && not_local.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail} {not_local:?}"))
    }
}
