use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL_SCENE: &str = r#""scene": {"h": 8, "w": 8, "n": 16}, "model": {"hidden_dim": 8}"#;

fn ciar_sim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ciar-sim"))
        .current_dir(dir)
        .env_remove("CIAR_SIM_JOBS")
        .args(args)
        .output()
        .expect("spawn ciar-sim")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_owned).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(str::to_owned).collect())
        .collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

#[test]
fn infinite_tau_without_prefix_never_calls_the_cloud() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!(r#"{{{SMALL_SCENE}, "policies": ["ciar", "base_cloud"]}}"#));
    let out = ciar_sim(dir.path(), &["--config", &cfg, "--tau", "inf", "--rho", "0", "--out", "o", "simulate"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let ciar = text.lines().find(|l| l.starts_with("ciar")).unwrap();
    assert!(ciar.contains(" 0.0000 "), "{ciar}");
    let cloud = text.lines().find(|l| l.starts_with("base_cloud")).unwrap();
    assert!(cloud.contains(" 1.0000 "), "{cloud}");

    let (header, rows) = read_csv(&dir.path().join("o/metrics.csv"));
    assert_eq!(
        header,
        ["seed", "policy", "tau", "rho", "K", "cloud_call_rate", "episodes", "steps", "device_accepts"]
    );
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][column(&header, "tau")], "inf");
    assert!(dir.path().join("o/traces/ciar_seed0.jsonl").exists());
    assert!(dir.path().join("o/traces/base_cloud_seed0.jsonl").exists());
}

#[test]
fn trace_lines_cover_the_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!(r#"{{{SMALL_SCENE}, "policies": ["ciar"]}}"#));
    let out = ciar_sim(dir.path(), &["--config", &cfg, "--out", "o", "simulate"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(dir.path().join("o/traces/ciar_seed0.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 64);
    for (i, v) in lines.iter().enumerate() {
        assert_eq!(v["pos"], i);
        for key in ["token", "origin", "uncertainty", "boundary", "uplink_bits", "downlink_bits"] {
            assert!(v.get(key).is_some(), "line {i} lacks {key}");
        }
    }
}

#[test]
fn malformed_json_is_a_config_error_with_offset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "{\"decode\": {\"tau\": 0.1,}}");
    let out = ciar_sim(dir.path(), &["--config", &cfg, "simulate"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    // The offending brace is at byte 23.
    assert!(err.contains("byte offset 23"), "{err}");
}

#[test]
fn invalid_field_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!(r#"{{{SMALL_SCENE}, "decode": {{"rho": 1.5}}}}"#));
    let out = ciar_sim(dir.path(), &["--config", &cfg, "simulate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("rho"), "{}", stderr(&out));
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(r#"{{{SMALL_SCENE}, "policies": ["ciar"], "sweep": {{"tau": [0.4, 0.1], "seed": [3, 1]}}}}"#),
    );
    let out = ciar_sim(dir.path(), &["--config", &cfg, "--out", "o", "--jobs", "2", "sweep"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let (header, rows) = read_csv(&dir.path().join("o/sweep.csv"));
    assert_eq!(rows.len(), 4);
    let (t, s) = (column(&header, "tau"), column(&header, "seed"));
    let keys: Vec<(&str, &str)> = rows.iter().map(|r| (r[t].as_str(), r[s].as_str())).collect();
    assert_eq!(keys, [("0.1", "1"), ("0.1", "3"), ("0.4", "1"), ("0.4", "3")]);
}

#[test]
fn sweep_results_do_not_depend_on_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(r#"{{{SMALL_SCENE}, "policies": ["ciar", "uniform"], "sweep": {{"tau": [0.1, 0.3], "seed": [0, 1, 2]}}}}"#),
    );
    let a = ciar_sim(dir.path(), &["--config", &cfg, "--out", "a", "--jobs", "1", "sweep"]);
    let b = ciar_sim(dir.path(), &["--config", &cfg, "--out", "b", "--jobs", "3", "sweep"]);
    assert!(a.status.success() && b.status.success());
    assert_eq!(
        fs::read(dir.path().join("a/sweep.csv")).unwrap(),
        fs::read(dir.path().join("b/sweep.csv")).unwrap()
    );
}

#[test]
fn empty_sweep_grid_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!(r#"{{{SMALL_SCENE}, "sweep": {{"tau": []}}}}"#));
    let out = ciar_sim(dir.path(), &["--config", &cfg, "sweep"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("sweep.tau"), "{}", stderr(&out));

    let cfg = write_config(dir.path(), &format!("{{{SMALL_SCENE}}}"));
    let out = ciar_sim(dir.path(), &["--config", &cfg, "sweep"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn netsim_latency_orders_networks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!(r#"{{{SMALL_SCENE}, "episodes": 3}}"#));
    let out = ciar_sim(dir.path(), &["--config", &cfg, "--out", "o", "netsim"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let (header, rows) = read_csv(&dir.path().join("o/netsim.csv"));
    // 3 seeds x 2 policies x 3 networks.
    assert_eq!(rows.len(), 18);
    let (p, net, total) = (column(&header, "policy"), column(&header, "network"), column(&header, "total_ms"));
    for policy in ["ciar", "uniform"] {
        let mean = |name: &str| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r[p] == policy && r[net] == name)
                .map(|r| r[total].parse().unwrap())
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean("5G") < mean("WiFi") && mean("WiFi") < mean("4G"), "{policy}");
    }
}

#[test]
fn train_with_zero_learning_rate_is_flat() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(r#"{{{SMALL_SCENE}, "training": {{"learning_rate": 0.0, "steps": 5, "dataset_size": 128, "batch_size": 64}}}}"#),
    );
    let out = ciar_sim(dir.path(), &["--config", &cfg, "--out", "o", "train"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let (header, rows) = read_csv(&dir.path().join("o/loss.csv"));
    assert_eq!(header, ["step", "total", "l_center", "l_upper", "l_lower", "l_dro", "l_kl"]);
    assert_eq!(rows.len(), 5);
    for r in &rows[1..] {
        assert_eq!(r[1..], rows[0][1..]);
    }
    assert!(dir.path().join("o/inter_head.bin").exists());
}

#[test]
fn trained_head_can_drive_a_simulation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(r#"{{{SMALL_SCENE}, "training": {{"steps": 3, "dataset_size": 128, "batch_size": 64}}}}"#),
    );
    let out = ciar_sim(dir.path(), &["--config", &cfg, "--out", "o", "train"]);
    assert!(out.status.success(), "{}", stderr(&out));

    let cfg = write_config(
        dir.path(),
        &format!(r#"{{{SMALL_SCENE}, "head": {{"kind": "file", "path": "o/inter_head.bin"}}, "policies": ["ciar"]}}"#),
    );
    let out = ciar_sim(dir.path(), &["--config", &cfg, "--out", "s", "simulate"]);
    assert!(out.status.success(), "{}", stderr(&out));

    // A head for a different vocabulary is rejected.
    let cfg = write_config(
        dir.path(),
        r#"{"scene": {"h": 8, "w": 8, "n": 12}, "model": {"hidden_dim": 8}, "head": {"kind": "file", "path": "o/inter_head.bin"}}"#,
    );
    let out = ciar_sim(dir.path(), &["--config", &cfg, "simulate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_without_block_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{{{SMALL_SCENE}}}"));
    let out = ciar_sim(dir.path(), &["--config", &cfg, "train"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ciar_sim(dir.path(), &["--seed", "3", "verify", "--sizes", "2,16", "--cases", "40"]);
    assert!(out.status.success(), "{}{}", stdout(&out), stderr(&out));
    let text = stdout(&out);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 10, "{text}");
    assert!(!text.contains("FAIL"));
}
