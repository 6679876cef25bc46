use voxfuse::commands::{ablation_grid, train_tla};
use voxfuse::config::ScenarioConfig;
use voxfuse::{Error, MlpWeights};

#[test]
fn training_lowers_epoch_loss_on_default_noise() {
    let mut cfg = ScenarioConfig::default();
    cfg.trajectory.n_frames = 12;
    cfg.train.episodes = 2;
    let mut seen = Vec::new();
    let (w, losses) = train_tla(&cfg, 3, |e, l| seen.push((e, l))).unwrap();
    assert_eq!(losses.len(), 3);
    assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert!(losses[2] < losses[0], "{losses:?}");
    let back = MlpWeights::from_json(&w.to_json().unwrap()).unwrap();
    assert_eq!(back, w);
}

#[test]
fn zero_epochs_return_seeded_initialization() {
    let cfg = ScenarioConfig::default();
    let (a, la) = train_tla(&cfg, 0, |_, _| {}).unwrap();
    let (b, _) = train_tla(&cfg, 0, |_, _| {}).unwrap();
    assert!(la.is_empty());
    assert_eq!(a, b);
    assert_ne!(a, MlpWeights::default());
}

#[test]
fn load_resolves_paths_against_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(
        &path,
        r#"{"output": {"dir": "runs"}, "pipeline": {"mlp_weights_path": "w/m.json"}, "trajectory": {"pose_file": "/abs/p.json"}}"#,
    )
    .unwrap();
    let cfg = ScenarioConfig::load(&path).unwrap();
    assert_eq!(cfg.output.dir, dir.path().join("runs"));
    assert_eq!(cfg.pipeline.mlp_weights_path.unwrap(), dir.path().join("w/m.json"));
    assert_eq!(cfg.trajectory.pose_file.unwrap(), std::path::PathBuf::from("/abs/p.json"));
}

#[test]
fn config_errors_carry_the_key_path() {
    let e = ScenarioConfig::from_json(r#"{"scene": {"room_size": [4.8, 4.8]}}"#).unwrap_err();
    match e {
        Error::Config { path, .. } => assert_eq!(path, "scene.room_size"),
        other => panic!("unexpected {other}"),
    }
    let e = ScenarioConfig::from_json(r#"{"extra": 1}"#).unwrap_err();
    assert!(e.to_string().contains("extra"), "{e}");
}

#[test]
fn ablation_grid_covers_every_cell_once() {
    let g = ablation_grid();
    assert_eq!(g.len(), 16);
    for (i, a) in g.iter().enumerate() {
        assert!(g[i + 1..].iter().all(|b| b != a));
    }
}
