//! Replays the fuzz corpus seeds through the same checks as the fuzz targets.

use std::fs;
use std::path::PathBuf;

use hirl_core::experiment::{parse_results, results_to_csv, BenchmarkConfig};
use hirl_core::low_level::parse_manifest;
use hirl_core::maze::Maze;
use hirl_core::neural::Mlp;

fn seeds(target: &str) -> Vec<(String, String)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let path = e.unwrap().path();
            (path.file_name().unwrap().to_string_lossy().into_owned(), fs::read_to_string(&path).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn maze_seeds() {
    for (name, text) in seeds("maze_json") {
        match Maze::from_json(&text) {
            Ok(maze) => assert_eq!(Maze::from_json(&maze.to_json()).unwrap(), maze, "{name}"),
            Err(_) => assert!(name == "ragged_rows" || name == "too_small", "{name}"),
        }
    }
}

#[test]
fn mlp_seeds() {
    for (name, text) in seeds("mlp_json") {
        match Mlp::from_json(&text) {
            Ok(net) => assert_eq!(net.forward(&vec![0.5; net.input_dim()]).unwrap().len(), net.output_dim(), "{name}"),
            Err(_) => assert_eq!(name, "shape_mismatch"),
        }
    }
}

#[test]
fn manifest_seeds() {
    for (name, text) in seeds("checkpoint_manifest") {
        assert_eq!(parse_manifest(&text).is_ok(), name == "valid", "{name}");
    }
}

#[test]
fn benchmark_config_seeds() {
    for (name, text) in seeds("benchmark_config") {
        BenchmarkConfig::from_json(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    assert!(BenchmarkConfig::from_json(r#"{"seeds": []}"#).unwrap_err().is_config());
}

#[test]
fn metrics_csv_seeds() {
    for (name, text) in seeds("metrics_csv") {
        let rows = parse_results(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(results_to_csv(&rows), text, "{name}");
    }
}
