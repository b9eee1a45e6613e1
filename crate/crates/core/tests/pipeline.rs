//! Training runs, run directories and sweeps end to end.

use std::fs;

use gscl::generate::SbmConfig;
use gscl::pipeline::{run_sweep, run_train, train, DatasetSource, Manifest, RunConfig, RunStatus, SweepSpec};
use gscl::{Graph32, LossVariant};
use serde_json::json;

fn acceptance_sbm() -> SbmConfig {
    SbmConfig {
        feature_dim: 16,
        feature_noise: 2.0,
        ..SbmConfig::new(vec![100, 100], 0.10, 0.01, 0)
    }
}

#[test]
fn loss_strictly_decreases_early_on() {
    let data = acceptance_sbm();
    let g: Graph32 = data.generate().unwrap();
    for variant in [LossVariant::Listwise, LossVariant::Pairwise] {
        let mut cfg = RunConfig::new(DatasetSource::Sbm(data.clone()), 0);
        cfg.epochs = 20;
        cfg.loss.variant = variant;
        let out = train(&g, None, &cfg).unwrap();
        let losses: Vec<f64> = out.log.iter().map(|r| r.loss).collect();
        assert_eq!(losses.len(), 20);
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{variant:?}: {losses:?}");
    }
}

#[test]
fn manifest_config_reproduces_the_run() {
    let mut data = acceptance_sbm();
    data.block_sizes = vec![20, 20];
    let mut cfg = RunConfig::new(DatasetSource::Sbm(data), 9);
    cfg.epochs = 6;
    cfg.embedding_dim = 16;
    cfg.eval_every = 3;
    let dir = tempfile::tempdir().unwrap();
    run_train::<f32>(&cfg, &dir.path().join("first")).unwrap();
    let manifest: Manifest =
        serde_json::from_slice(&fs::read(dir.path().join("first/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.config_hash, cfg.hash());
    assert_eq!(manifest.seed, 9);
    assert_eq!(manifest.status, RunStatus::Completed);
    run_train::<f32>(&manifest.config, &dir.path().join("again")).unwrap();
    for f in ["metrics.jsonl", "params.bin", "embeddings.bin", "results.csv"] {
        assert_eq!(
            fs::read(dir.path().join("first").join(f)).unwrap(),
            fs::read(dir.path().join("again").join(f)).unwrap(),
            "{f}"
        );
    }
    let metrics = fs::read_to_string(dir.path().join("first/metrics.jsonl")).unwrap();
    let evaluated = metrics.lines().filter(|l| l.contains("\"eval\"")).count();
    assert_eq!(evaluated, 2);
}

#[test]
fn interrupted_sweep_resumes_to_the_same_best() {
    let mut data = acceptance_sbm();
    data.block_sizes = vec![15, 15];
    let mut base = RunConfig::new(DatasetSource::Sbm(data), 4);
    base.epochs = 4;
    base.embedding_dim = 8;
    let spec: SweepSpec = serde_json::from_value(json!({
        "base": base,
        "grid": {"loss.tau_base": [0.3, 0.6], "lr": [0.001, 0.01]},
    }))
    .unwrap();

    let full = tempfile::tempdir().unwrap();
    let reference = run_sweep::<f32>(&spec, full.path()).unwrap();
    assert_eq!(reference.rows.len(), 4);

    // Simulate a crash after two points: only their completion records exist.
    let partial = tempfile::tempdir().unwrap();
    run_sweep::<f32>(&spec, partial.path()).unwrap();
    let runs = partial.path().join("runs");
    let mut dirs: Vec<_> = fs::read_dir(&runs).unwrap().map(|e| e.unwrap().path()).collect();
    dirs.sort();
    for d in &dirs[2..] {
        fs::remove_dir_all(d).unwrap();
    }
    fs::remove_file(partial.path().join("sweep.csv")).unwrap();
    let resumed = run_sweep::<f32>(&spec, partial.path()).unwrap();
    assert_eq!(resumed, reference);
    assert_eq!(
        fs::read(partial.path().join("best.json")).unwrap(),
        fs::read(full.path().join("best.json")).unwrap()
    );
}

#[test]
fn unlabeled_graphs_train_without_evaluation() {
    let mut data = acceptance_sbm();
    data.block_sizes = vec![12, 12];
    let g: Graph32 = data.generate().unwrap();
    let g = Graph32::from_edges(g.edges().collect::<Vec<_>>(), g.features().clone(), None).unwrap();
    let mut cfg = RunConfig::new(DatasetSource::Sbm(acceptance_sbm()), 1);
    cfg.epochs = 3;
    cfg.embedding_dim = 8;
    let out = train(&g, None, &cfg).unwrap();
    assert!(out.final_eval.is_none() && out.split.is_none());
    assert_eq!(out.embeddings.shape(), (24, 8));
}

#[test]
fn invalid_configs_are_rejected_before_training() {
    let mut cfg = RunConfig::new(DatasetSource::Sbm(acceptance_sbm()), 1);
    cfg.loss.k = 5;
    assert!(cfg.validate().is_err());
    let text = r#"{"dataset":{"kind":"sbm","block_sizes":[4],"p_in":0.5,"p_out":0.1,"feature_dim":2,"feature_noise":1.0,"seed":0}}"#;
    assert!(RunConfig::from_json(text).is_err(), "seed is mandatory");
}
