mod common;

use repairlab::sim::{EpisodeResult, SimConfig};
use repairlab::train::{annotate, clearance, AnnotationConfig};

#[test]
fn annotate_matches_brute_force_on_random_traces() {
    let traces = common::random_traces(100, 41);
    let dt = SimConfig::default().dt;
    let cfg = AnnotationConfig::default();
    assert_eq!(cfg.window_steps(dt), 30);
    let collisions = traces.iter().filter(|t| t.outcome.result == EpisodeResult::Collision).count();
    assert!(collisions > 0 && collisions < traces.len(), "{collisions} collisions");
    for (i, trace) in traces.iter().enumerate() {
        let got: Vec<u8> = annotate(trace, &cfg, dt).iter().map(|l| l.y_safe).collect();
        assert_eq!(got, common::brute_force_labels(trace, 1.0, 30), "trace {i}");
    }
}

#[test]
fn window_only_ablation_never_adds_positives() {
    let dt = SimConfig::default().dt;
    let full = AnnotationConfig::default();
    let window_only = AnnotationConfig {
        use_clearance: false,
        ..full.clone()
    };
    for trace in common::random_traces(20, 43) {
        let a = annotate(&trace, &full, dt);
        let b = annotate(&trace, &window_only, dt);
        assert!(a.iter().zip(&b).all(|(x, y)| x.y_safe >= y.y_safe));
    }
}

#[test]
fn clearance_agrees_with_edge_distance() {
    for trace in common::random_traces(10, 47) {
        for step in &trace.steps {
            let ego = step.obs.ego.bounding_box().corners();
            let oracle = step
                .obs
                .participants
                .iter()
                .map(|p| common::polygon_distance(&ego, &p.bounding_box().corners()))
                .fold(f64::INFINITY, f64::min);
            let got = clearance(&step.obs);
            assert!(got == oracle || (got - oracle).abs() < 1e-9, "{got} vs {oracle}");
        }
    }
}
