use std::fs;

use sigdraw::error::Error;
use sigdraw::experiment::{run_experiment, RunConfig, Stage};

fn tiny() -> RunConfig {
    RunConfig::from_toml(
        r#"
seed = 3
[data]
trips = 36
max_pairs = 24
test_count = 6
[render]
size_px = 128
export_videos = 2
[sft]
steps = 40
log_every = 10
[rl]
iterations = 3
"#,
    )
    .unwrap()
}

#[test]
fn tiny_run_is_complete_and_deterministic() {
    let cfg = tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = run_experiment(&cfg, a.path(), &Stage::ALL).unwrap();
    let mb = run_experiment(&cfg, b.path(), &Stage::ALL).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(ma.config_hash, cfg.hash());
    let names: Vec<&str> = Stage::ALL.iter().map(|s| s.name()).collect();
    assert_eq!(ma.stages(), names);
    let pair = ma.stage(Stage::Pair).unwrap();
    assert_eq!(pair["pairs"], "24");
    assert_eq!(pair["test"], "6");

    for rel in [
        "manifest.txt",
        "pairs.csv",
        "models/sft.ckpt",
        "models/rl.ckpt",
        "models/training_log.csv",
        "eval/metrics.csv",
        "eval/rewards.csv",
        "report/table.csv",
        "render/video_0001/frames/frame_0021.ppm",
    ] {
        assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel}");
    }

    let table = fs::read_to_string(a.path().join("report/table.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("model,subset,mae,rmse,l100,g1000"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    for model in ["sft", "rl", "rule_sig"] {
        assert!(rows.iter().any(|r| r[0] == model && r[1] == "all"), "{model}");
    }
    for r in &rows {
        let v: Vec<f64> = r[2..].iter().map(|x| x.parse().unwrap()).collect();
        assert!(v[0] <= v[1] + 1e-9 && v[2] + v[3] <= 1.0 + 1e-12, "{r:?}");
    }
    let log = fs::read_to_string(a.path().join("models/training_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3);
}

#[test]
fn stage_dependencies_and_config_pinning() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let err = run_experiment(&cfg, dir.path(), &[Stage::Pair]).unwrap_err();
    assert!(matches!(err, Error::MissingStage(ref s) if s == "gen-data"), "{err}");
    run_experiment(&cfg, dir.path(), &[Stage::GenWorld, Stage::GenData]).unwrap();
    let err = run_experiment(&cfg, dir.path(), &[Stage::TrainRl]).unwrap_err();
    assert!(matches!(err, Error::MissingStage(ref s) if s == "train-sft"), "{err}");

    let mut other = cfg.clone();
    other.seed += 1;
    assert!(matches!(run_experiment(&other, dir.path(), &[Stage::Pair]), Err(Error::Config(_))));

    // stages passed out of order still run in pipeline order
    let m = run_experiment(&cfg, dir.path(), &[Stage::Baseline, Stage::Pair]).unwrap();
    assert_eq!(m.stages(), vec!["gen-world", "gen-data", "pair", "baseline"]);
    let text = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(text.starts_with(&format!("config_hash={} seed=3\n", cfg.hash())));
}
