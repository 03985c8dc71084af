//! Report statistics and worker-count independence.

use std::sync::Arc;

use proptest::prelude::*;
use protoshift::model::ModelConfig;
use protoshift::synth::{Benchmark, SynthConfig};
use protoshift::trainer::{evaluate, EvalConfig};
use protoshift::EvalReport;

#[test]
fn report_matches_hand_computation() {
    // 1, 0.5, 0.5, 0: mean 0.5, sample variance (0.25 + 0 + 0 + 0.25) / 3 = 1/6
    let r = EvalReport::from_accuracies(vec![1.0, 0.5, 0.5, 0.0]);
    assert_eq!(r.n, 4);
    assert!((r.mean - 0.5).abs() < 1e-12);
    assert!((r.ci95 - 1.96 * (1.0f64 / 6.0).sqrt() / 2.0).abs() < 1e-12);

    // twenty episodes at 0.6 and twenty at 0.8: mean 0.7, s^2 = 40 * 0.01 / 39
    let mut accs = vec![0.6; 20];
    accs.extend(vec![0.8; 20]);
    let r = EvalReport::from_accuracies(accs);
    assert!((r.mean - 0.7).abs() < 1e-12);
    assert!((r.ci95 - 1.96 * (0.4f64 / 39.0).sqrt() / 40f64.sqrt()).abs() < 1e-12);

    let single = EvalReport::from_accuracies(vec![0.25]);
    assert_eq!((single.mean, single.ci95), (0.25, 0.0));
}

proptest! {
    #[test]
    fn report_agrees_with_two_pass_oracle(accs in prop::collection::vec(0.0f64..=1.0, 2..300)) {
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let r = EvalReport::from_accuracies(accs.clone());
        prop_assert!((r.mean - mean).abs() < 1e-12);
        prop_assert!((r.ci95 - 1.96 * var.sqrt() / n.sqrt()).abs() < 1e-12);
        let (lo, hi) = r.interval();
        prop_assert!(lo <= r.mean && r.mean <= hi);
    }
}

#[test]
fn parallel_evaluation_is_bitwise_serial() {
    let bench = Benchmark::generate(&SynthConfig::hard_shift()).unwrap();
    let model = ModelConfig::default()
        .build(bench.dataset.feature_dim(), Arc::clone(&bench.graph), bench.dataset.class_names(), 5)
        .unwrap();
    let cfg = EvalConfig { episodes: 300, seed: 17, ..EvalConfig::default() };
    let serial = evaluate(&model, &bench.dataset, &cfg.spec(), cfg.episodes, cfg.seed, None).unwrap();
    for workers in [1, 2, 3, 8] {
        let par = evaluate(&model, &bench.dataset, &cfg.spec(), cfg.episodes, cfg.seed, Some(workers)).unwrap();
        assert_eq!(par.accuracies, serial.accuracies, "workers={workers}");
        assert_eq!(par.mean.to_bits(), serial.mean.to_bits());
        assert_eq!(par.ci95.to_bits(), serial.ci95.to_bits());
    }
    let other = evaluate(&model, &bench.dataset, &cfg.spec(), cfg.episodes, 18, None).unwrap();
    assert_ne!(other.accuracies, serial.accuracies);
}

#[test]
fn json_report_has_summary_fields_only() {
    let r = EvalReport::from_accuracies(vec![0.5, 1.0]);
    let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    let obj = v.as_object().unwrap();
    assert_eq!(obj.len(), 3);
    assert_eq!(obj["n"], 2);
    assert_eq!(obj["mean"].as_f64().unwrap(), 0.75);
}
