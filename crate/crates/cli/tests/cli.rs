use std::fs;
use std::process::Command;

use hirl_cli::{bench_config, BenchArgs};
use hirl_core::experiment::parse_results;
use hirl_core::Algorithm;

fn lab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hirl-lab"))
}

fn args() -> BenchArgs {
    BenchArgs {
        config: None,
        algos: None,
        episodes: None,
        seeds: None,
        first_seed: 0,
        checkpoint: None,
        holdout: None,
        out: None,
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.json");
    fs::write(&path, r#"{"episodes": 7, "seeds": [9], "algorithms": ["noise"]}"#).unwrap();
    let config = bench_config(&BenchArgs { config: Some(path.clone()), ..args() }).unwrap();
    assert_eq!(
        (config.episodes, config.seeds.clone(), config.algorithms.clone()),
        (7, vec![9], vec![Algorithm::Noise])
    );
    let config = bench_config(&BenchArgs {
        config: Some(path),
        algos: Some(vec!["reward".into(), "dagger".into()]),
        seeds: Some(3),
        first_seed: 10,
        ..args()
    })
    .unwrap();
    assert_eq!(config.algorithms, vec![Algorithm::Reward, Algorithm::Dagger]);
    assert_eq!(config.seeds, vec![10, 11, 12]);
    assert_eq!(config.episodes, 7);
}

#[test]
fn configuration_errors_exit_with_status_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"episodes": 3, "colour": "blue"}"#).unwrap();
    for argv in [
        vec!["bench".to_string(), "--config".into(), bad.display().to_string()],
        vec!["bench".into(), "--algos".into(), "dagger,warp".into()],
        vec!["bench".into(), "--seeds".into(), "0".into()],
        vec![
            "serve".into(),
            "--no-pretrain".into(),
            "--checkpoint".into(),
            dir.path().join("none").display().to_string(),
        ],
    ] {
        let out = lab().args(&argv).output().unwrap();
        assert_eq!(out.status.code(), Some(2), "{argv:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn unreadable_config_file_is_an_io_error() {
    let err = bench_config(&BenchArgs { config: Some("/nonexistent/bench.json".into()), ..args() }).unwrap_err();
    assert!(!err.is_config(), "{err}");
    let out = lab().args(["bench", "--config", "/nonexistent/bench.json"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bench_writes_identical_csv_on_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt");
    let out = lab().args(["pretrain", "--out"]).arg(&ckpt).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ckpt.join("manifest.json").exists());

    let mut csvs = Vec::new();
    for i in 0..2 {
        let path = dir.path().join(format!("run{i}.csv"));
        let out = lab()
            .args([
                "bench",
                "--algos",
                "dagger,reward",
                "--episodes",
                "4",
                "--seeds",
                "2",
                "--holdout",
                "3",
                "--checkpoint",
            ])
            .arg(&ckpt)
            .arg("--out")
            .arg(&path)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stderr).contains("frozen success"));
        csvs.push(fs::read(&path).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    let rows = parse_results(std::str::from_utf8(&csvs[0]).unwrap()).unwrap();
    assert_eq!(rows.len(), 2 * 2 * 4);
}
