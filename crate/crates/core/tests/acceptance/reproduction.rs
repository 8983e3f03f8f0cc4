use std::path::PathBuf;

use nettop::bayes::EmOptions;
use nettop::eval::{run_benchmark, BenchmarkTable, Condition, ExperimentSpec, MethodSpec};
use nettop::glasso::{beta_grid, delta_grid};

const SEED: u64 = 20240601;

fn artifact(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).expect("artifact directory");
    dir.join(name)
}

fn save(table: &BenchmarkTable, name: &str) -> Result<PathBuf, String> {
    let path = artifact(name);
    let file = std::fs::File::create(&path).map_err(|e| e.to_string())?;
    table.write_csv(file).map_err(|e| e.to_string())?;
    Ok(path)
}

fn spec(name: &str, samples: usize, order: usize, trials: usize, methods: Vec<MethodSpec>) -> ExperimentSpec {
    ExperimentSpec {
        conditions: vec![Condition {
            name: name.into(),
            samples,
            order,
            nodes: 6,
            edge_prob: 0.5,
        }],
        methods,
        trials,
        master_seed: SEED,
        output_dir: None,
        em: EmOptions::default(),
    }
}

fn dis(table: &BenchmarkTable, cond: &str, method: &str, tuning: &str) -> Result<f64, String> {
    table
        .find(cond, method, tuning)
        .map(|r| r.dis)
        .ok_or_else(|| format!("missing row {method} {tuning}"))
}

pub fn desk_ordering() -> Result<String, String> {
    let s = spec(
        "N500",
        500,
        50,
        20,
        vec![
            MethodSpec::Bs { taus: vec![0.0] },
            MethodSpec::GlassoCv {
                deltas: delta_grid(2000.0, 10.0),
            },
            MethodSpec::KglassoCv {
                deltas: delta_grid(2000.0, 10.0),
                betas: beta_grid(),
            },
        ],
    );
    let table = run_benchmark(&s, None).map_err(|e| e.to_string())?;
    let path = save(&table, "desk_ordering.csv")?;
    let bs = dis(&table, "N500", "bs", "tau=0")?;
    let gl = dis(&table, "N500", "glasso-cv", "cv")?;
    let kg = dis(&table, "N500", "kglasso-cv", "cv")?;
    let detail = format!(
        "dis BS {bs:.4}, GLasso {gl:.4}, kernel-GLasso {kg:.4}; BS envelope 0.25 {} (gap {:+.4}); table {}",
        if bs <= 0.25 { "met" } else { "missed" },
        bs - 0.25,
        path.display()
    );
    if bs < gl && bs < kg {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn v_regimes() -> Result<String, String> {
    let both = || {
        vec![
            MethodSpec::Bs {
                taus: (0..=10).map(f64::from).collect(),
            },
            MethodSpec::BsIterEm {
                taus: (0..=10).map(f64::from).collect(),
            },
        ]
    };
    let small = run_benchmark(&spec("N50", 50, 20, 20, both()), None).map_err(|e| e.to_string())?;
    save(&small, "v_small.csv")?;
    let v_small = small.v_measure("N50").map_err(|e| e.to_string())?;
    let large = run_benchmark(&spec("N2000", 2000, 50, 10, both()), None).map_err(|e| e.to_string())?;
    let path = save(&large, "v_large.csv")?;
    let v_large = large.v_measure("N2000").map_err(|e| e.to_string())?;
    let detail = format!(
        "V(N=50, n=20) = {v_small:.2}% (needs >= 0), V(N=2000, n=50) = {v_large:.2}% (needs <= 5); tables in {}",
        path.parent().map(|p| p.display().to_string()).unwrap_or_default()
    );
    std::fs::write(
        artifact("v_values.txt"),
        format!("V_N50_n20 {v_small}\nV_N2000_n50 {v_large}\n"),
    )
    .map_err(|e| e.to_string())?;
    if v_small >= 0.0 && v_large <= 5.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn determinism() -> Result<String, String> {
    let s = spec(
        "small",
        60,
        8,
        6,
        vec![
            MethodSpec::Bs {
                taus: vec![0.0, 2.0],
            },
            MethodSpec::BsIterEm {
                taus: vec![0.0, 2.0],
            },
            MethodSpec::Glasso {
                deltas: vec![0.0, 5.0, 50.0],
            },
            MethodSpec::KglassoCv {
                deltas: delta_grid(100.0, 10.0),
                betas: vec![0.5, 0.9],
            },
        ],
    );
    let csv = |threads: usize| -> Result<Vec<u8>, String> {
        let table = run_benchmark(&s, Some(threads)).map_err(|e| e.to_string())?;
        let mut out = Vec::new();
        table.write_csv(&mut out).map_err(|e| e.to_string())?;
        Ok(out)
    };
    let first = csv(1)?;
    let again = csv(1)?;
    let wide = csv(4)?;
    if first == again && first == wide {
        Ok(format!(
            "{} CSV bytes identical across 2 runs and 1 vs 4 threads",
            first.len()
        ))
    } else {
        Err("benchmark CSV differs between runs or thread counts".into())
    }
}
