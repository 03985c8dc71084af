//! Write, read and write again must give the same bytes.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use protoshift::model::ModelConfig;
use protoshift::synth::{Benchmark, SynthConfig};
use protoshift::trainer::{train, TrainConfig};
use protoshift::{DistanceMode, GpnModel, SharedBranch};

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn benchmark_round_trip_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    Benchmark::generate(&SynthConfig::easy_shift()).unwrap().write(&a).unwrap();
    let loaded = Benchmark::load(&a).unwrap();
    loaded.write(&b).unwrap();
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    assert_eq!(dir_bytes(&a).len(), 6);
}

#[test]
fn trained_checkpoint_round_trip_is_byte_identical() {
    let bench = Benchmark::generate(&SynthConfig::hard_shift()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    for (i, (lambda, distance, branch)) in [
        (0.5, DistanceMode::Squared, SharedBranch::Gcn),
        (0.3, DistanceMode::Unsquared, SharedBranch::Fc),
    ]
    .into_iter()
    .enumerate()
    {
        let cfg = ModelConfig { lambda, distance, branch, ..ModelConfig::default() };
        let model = cfg
            .build(bench.dataset.feature_dim(), Arc::clone(&bench.graph), bench.dataset.class_names(), 1)
            .unwrap();
        let train_cfg = TrainConfig { iterations: 20, val_every: 10, val_episodes: 5, ..TrainConfig::desk() };
        let model = train(model, &bench.dataset, &train_cfg).unwrap().model;
        let model = if i == 1 { model.with_random_vectors(77) } else { model };

        let first = tmp.path().join(format!("m{i}.ckpt"));
        let second = tmp.path().join(format!("m{i}b.ckpt"));
        model.save(&first).unwrap();
        let loaded = GpnModel::load(&first, Arc::clone(&bench.graph), bench.dataset.class_names()).unwrap();
        loaded.save(&second).unwrap();
        assert_eq!(fs::read(&first).unwrap(), fs::read(&second).unwrap());
        assert_eq!(loaded.lambda(), lambda);
        assert_eq!(loaded.distance_mode(), distance);
        assert_eq!(loaded.branch(), branch);
        assert_eq!(loaded.shared_table().unwrap(), model.shared_table().unwrap());
    }
}

#[test]
fn corrupt_checkpoint_is_an_error() {
    let bench = Benchmark::generate(&SynthConfig::easy_shift()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.ckpt");
    fs::write(&path, b"not a checkpoint\n").unwrap();
    assert!(GpnModel::load(&path, Arc::clone(&bench.graph), bench.dataset.class_names()).is_err());
    assert!(GpnModel::load(&tmp.path().join("missing"), bench.graph, bench.dataset.class_names()).is_err());
}
