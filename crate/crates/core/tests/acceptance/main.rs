//! Acceptance suite. Runs every criterion in sequence and prints one
//! `PASS`/`FAIL` line per criterion; the process fails if any criterion
//! fails. Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 2 4`.

mod common;
mod em;
mod glasso_kkt;
mod reproduction;
mod search_oracle;

use std::time::Instant;

type Criterion = (u32, &'static str, fn() -> Result<String, String>);

const CRITERIA: &[Criterion] = &[
    (1, "EM monotonicity", em::monotonicity),
    (2, "score oracle equivalence", em::score_oracle),
    (3, "EM update verification", em::update_rules),
    (4, "greedy vs exhaustive oracle", search_oracle::greedy_vs_exhaustive),
    (5, "GLasso KKT and oracle", glasso_kkt::kkt_and_oracle),
    (6, "desk-scale ordering", reproduction::desk_ordering),
    (7, "V-metric regimes", reproduction::v_regimes),
    (8, "benchmark determinism", reproduction::determinism),
];

fn main() {
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for &(id, name, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id} ({name}): FAIL [{secs:.1}s] {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
