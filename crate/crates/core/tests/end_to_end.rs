use nettop::eval::{confusion, make_trial, run_method, Condition, ExperimentSpec, MethodSpec, run_benchmark};
use nettop::bayes::EmOptions;
use nettop::model::{generate_random, simulate, true_topology, GeneratorOptions};
use nettop::search::{identify_network, SearchConfig};

fn spec(methods: Vec<MethodSpec>, trials: usize) -> ExperimentSpec {
    ExperimentSpec {
        conditions: vec![Condition {
            name: "e2e".into(),
            samples: 400,
            order: 10,
            nodes: 4,
            edge_prob: 0.5,
        }],
        methods,
        trials,
        master_seed: 5,
        output_dir: None,
        em: EmOptions::default(),
    }
}

#[test]
fn generated_network_is_mostly_recovered() {
    let sys = generate_random(4, 0.5, GeneratorOptions::default(), 21).unwrap();
    let truth = true_topology(&sys);
    let data = simulate(&sys, 2000, 22).unwrap();
    let est = identify_network(&data, 20, &SearchConfig::default()).unwrap();
    assert!(!est.topology.allows_self_loops());
    assert_eq!(est.nodes.len(), 4);
    let c = confusion(&est.topology, &truth, 4);
    if let Some(tpr) = c.tpr() {
        assert!(tpr >= 0.5, "{c:?}");
    }
}

#[test]
fn every_method_yields_one_topology_per_tuning_value() {
    let s = spec(vec![], 1);
    let trial = make_trial(&s, 0, 0).unwrap();
    let methods = [
        (MethodSpec::Bs { taus: vec![0.0, 1e9] }, 2),
        (MethodSpec::Glasso { deltas: vec![0.0, 1e9] }, 2),
        (MethodSpec::Kglasso { deltas: vec![5.0], beta: 0.7 }, 1),
        (MethodSpec::GlassoCv { deltas: vec![0.0, 10.0, 20.0] }, 1),
    ];
    for (m, count) in methods {
        let gs = run_method(&m, &trial, 10, &s.em).unwrap();
        assert_eq!(gs.len(), count, "{}", m.name());
        assert!(gs.iter().all(|g| !g.allows_self_loops() && g.nodes() == 4));
    }
    let huge = run_method(&MethodSpec::Bs { taus: vec![1e9] }, &trial, 10, &s.em).unwrap();
    assert!(huge[0].is_empty());
    let dense = run_method(&MethodSpec::Glasso { deltas: vec![0.0] }, &trial, 10, &s.em).unwrap();
    assert_eq!(dense[0].len(), 12);
}

#[test]
fn benchmark_table_supports_v() {
    let taus: Vec<f64> = (0..=10).map(f64::from).collect();
    let s = spec(
        vec![
            MethodSpec::Bs { taus: taus.clone() },
            MethodSpec::BsIterEm { taus },
        ],
        2,
    );
    let table = run_benchmark(&s, Some(1)).unwrap();
    assert_eq!(table.rows.len(), 22);
    for r in &table.rows {
        assert!((0.0..=1.0).contains(&r.tpr) && (0.0..=1.0).contains(&r.fpr));
        assert!((r.dis - (r.fpr.powi(2) + (1.0 - r.tpr).powi(2)).sqrt()).abs() < 1e-15);
    }
    let v = table.v_measure("e2e");
    assert!(v.is_ok() || table.rows.iter().any(|r| r.method == "bs" && r.dis == 0.0));
}
