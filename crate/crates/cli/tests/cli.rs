//! End-to-end tests of the `dsse` binary: exit codes, output documents, and
//! determinism across worker counts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dsse"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

#[test]
fn check_reports_fixture_shape() {
    let net = fixture("ieee123_balanced.json");
    let out = run(&["check", "--network", path_str(&net)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("61 buses, 60 lines"));
}

#[test]
fn check_rejects_cyclic_network() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cyclic.json");
    std::fs::write(
        &path,
        r#"{
            "base_mva": 1.0, "base_kv": 1.0,
            "buses": [
                {"id": "a", "kind": "slack", "load_p_kw": 0, "load_q_kvar": 0, "dg_p_kw": 0},
                {"id": "b", "kind": "pq", "load_p_kw": 1, "load_q_kvar": 0, "dg_p_kw": 0},
                {"id": "c", "kind": "pq", "load_p_kw": 1, "load_q_kvar": 0, "dg_p_kw": 0}
            ],
            "lines": [
                {"id": "l1", "from": "a", "to": "b", "r_ohm": 1, "x_ohm": 1},
                {"id": "l2", "from": "b", "to": "c", "r_ohm": 1, "x_ohm": 1},
                {"id": "l3", "from": "c", "to": "a", "r_ohm": 1, "x_ohm": 1}
            ]
        }"#,
    )
    .unwrap();
    let out = run(&["check", "--network", path_str(&path)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains('['), "finding codes on stdout");
}

#[test]
fn missing_input_file_is_usage_error() {
    let out = run(&["check", "--network", "/no/such/net.json"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&[
        "solve",
        "--network",
        "/no/such/net.json",
        "--out",
        "/tmp/unused.json",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn solve_linear_matches_reference_values() {
    let dir = tempfile::tempdir().unwrap();
    let dispatch = dir.path().join("dispatch.json");
    std::fs::write(&dispatch, r#"{"b2": [-0.1, -0.05]}"#).unwrap();
    let out_path = dir.path().join("solution.json");
    let net = fixture("chain3.json");
    let out = run(&[
        "solve",
        "--network",
        path_str(&net),
        "--dispatch",
        path_str(&dispatch),
        "--method",
        "linear",
        "--out",
        path_str(&out_path),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    let v2 = doc["v_sq"]["b2"].as_f64().unwrap();
    assert!((v2 - 0.9930).abs() < 1e-12, "v_sq(b2) = {v2}");
}

#[test]
fn solve_rejects_unknown_dispatch_bus() {
    let dir = tempfile::tempdir().unwrap();
    let dispatch = dir.path().join("dispatch.json");
    std::fs::write(&dispatch, r#"{"nowhere": [-0.1, 0.0]}"#).unwrap();
    let net = fixture("chain3.json");
    let out = run(&[
        "solve",
        "--network",
        path_str(&net),
        "--dispatch",
        path_str(&dispatch),
        "--out",
        path_str(&dir.path().join("solution.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn estimate_full_coverage_zero_noise_recovers_truth() {
    // Linear truth keeps the measurement pool consistent with the estimation
    // model, so full coverage and zero noise reproduce it exactly.
    let dir = tempfile::tempdir().unwrap();
    let truth = dir.path().join("truth.json");
    let net = fixture("ieee123_balanced.json");
    let out = run(&[
        "solve",
        "--network",
        path_str(&net),
        "--method",
        "linear",
        "--seed",
        "42",
        "--out",
        path_str(&truth),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let est = dir.path().join("estimate.json");
    let out = run(&[
        "estimate",
        "--network",
        path_str(&net),
        "--truth",
        path_str(&truth),
        "--node-fraction",
        "1.0",
        "--flow-fraction",
        "1.0",
        "--out",
        path_str(&est),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&est).unwrap()).unwrap();
    assert!(doc["run_errors"]["mean_err_v"].as_f64().unwrap() < 1e-8);
    assert!(doc["run_errors"]["max_err_f"].as_f64().unwrap() < 1e-8);
    assert_eq!(doc["metadata"]["resamples_used"].as_u64(), Some(0));
}

#[test]
fn estimate_is_byte_identical_for_same_seed() {
    let dir = tempfile::tempdir().unwrap();
    let truth = dir.path().join("truth.json");
    let net = fixture("ieee123_balanced.json");
    let out = run(&[
        "solve",
        "--network",
        path_str(&net),
        "--seed",
        "7",
        "--out",
        path_str(&truth),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let mut bytes = Vec::new();
    for name in ["a.json", "b.json"] {
        let est = dir.path().join(name);
        let out = run(&[
            "estimate",
            "--network",
            path_str(&net),
            "--truth",
            path_str(&truth),
            "--ev",
            "0.003",
            "--ei",
            "0.006",
            "--preference",
            "edge",
            "--seed",
            "11",
            "--index",
            "3",
            "--out",
            path_str(&est),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        bytes.push(std::fs::read(&est).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn grid_outputs_ignore_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("grid.json");
    std::fs::write(
        &cfg,
        r#"{
            "e_v_list": [0.003],
            "e_i_list": [0.006],
            "preferences": ["edge"],
            "dispatch_count": 8,
            "master_seed": 5
        }"#,
    )
    .unwrap();
    let net = fixture("ieee123_balanced.json");
    let mut dirs = Vec::new();
    for (name, jobs) in [("serial", "1"), ("parallel", "4")] {
        let out_dir = dir.path().join(name);
        let out = run(&[
            "grid",
            "--network",
            path_str(&net),
            "--config",
            path_str(&cfg),
            "--jobs",
            jobs,
            "--quiet",
            "--out-dir",
            path_str(&out_dir),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        dirs.push(out_dir);
    }
    let mut names: Vec<String> = std::fs::read_dir(&dirs[0])
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 9, "4 csv + 4 md + sidecar");
    for name in &names {
        let a = std::fs::read(dirs[0].join(name)).unwrap();
        let b = std::fs::read(dirs[1].join(name)).unwrap();
        assert_eq!(a, b, "{name} differs across worker counts");
    }
}

#[test]
fn grid_tables_reingest_as_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("grid.json");
    std::fs::write(
        &cfg,
        r#"{
            "e_v_list": [0.001, 0.01],
            "e_i_list": [0.003],
            "preferences": ["edge"],
            "dispatch_count": 5,
            "master_seed": 1
        }"#,
    )
    .unwrap();
    let net = fixture("ieee123_balanced.json");
    let out_dir = dir.path().join("grid");
    let out = run(&[
        "grid",
        "--network",
        path_str(&net),
        "--config",
        path_str(&cfg),
        "--quiet",
        "--out-dir",
        path_str(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let table = std::fs::read_to_string(out_dir.join("table_avg_mean_v_edge.csv")).unwrap();
    let mut lines = table.lines();
    let header = lines.next().unwrap();
    assert_eq!(header, r"e_i\e_v,0.1,1");
    let row = lines.next().unwrap();
    let cells: Vec<&str> = row.split(',').collect();
    assert_eq!(cells.len(), 3);
    assert_eq!(cells[0], "0.3");
    for cell in &cells[1..] {
        cell.parse::<f64>().expect("numeric cell");
    }

    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("sidecar.json")).unwrap())
            .unwrap();
    assert_eq!(sidecar["cells"].as_array().unwrap().len(), 2);
}
