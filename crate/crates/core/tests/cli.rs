use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TWO_CYCLE: &str = r#"{"graph": {"nodes": 2, "edges": [[1, 2], [2, 1]]},
    "coupling": {"family": "crowd_aversion", "a": 1},
    "initial_distribution": [0.9, 0.1],
    "time_steps": 256,
    "planning": {"enabled": true, "resolution": 32}"#;

fn config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.json");
    fs::write(&path, format!("{TWO_CYCLE}{extra}}}")).unwrap();
    path
}

fn graphmfg(command: &str, config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graphmfg"))
        .args([command, "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let out = dir.path().join("out");
    for command in ["solve-mfg", "verify-nash", "solve-planning", "compare", "check-master", "check-monotonicity"] {
        let o = graphmfg(command, &cfg, &out);
        assert_eq!(o.status.code(), Some(0), "{command}: {}", stderr(&o));
        let manifest = json(&out.join("manifest.json"));
        assert_eq!(manifest["command"], command);
        assert_eq!(manifest["status"], 0);
        assert_eq!(manifest["seed"], 42);
        assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    }
    let report = json(&out.join("report.json"));
    assert_eq!(report["converged"], true);
    assert!(report["residual"].as_f64().unwrap() <= 1e-8);
    let nash = json(&out.join("nash.json"));
    assert!(nash["max_gap"].as_f64().unwrap() <= 1e-6);
    assert!(nash["oracle_error"].as_f64().unwrap() <= 1e-6);
    assert!(nash["worst_node"].as_u64().unwrap() >= 1);
    assert!(nash["deviation_count"].as_u64().unwrap() >= 60);
    let gap = json(&out.join("gap.json"));
    assert!(gap["sup_gap"].as_f64().unwrap() <= 1e-2, "{gap}");
    let master = json(&out.join("master_check.json"));
    assert!(master["residual_sup"].as_f64().unwrap().is_finite());
    assert_eq!(master["value_function"]["passed"], true);
    let mono = json(&out.join("monotonicity.json"));
    assert_eq!(mono["report"]["running"]["verdict"], "monotone");

    let trajectory = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let mut lines = trajectory.lines();
    assert_eq!(lines.next().unwrap(), "t,node,u,m,lambda_1");
    assert_eq!(lines.count(), 2 * 257);
    let phi = fs::read_to_string(out.join("phi.csv")).unwrap();
    assert_eq!(phi.lines().next().unwrap(), "t,m1,m2,phi");
    assert_eq!(phi.lines().count(), 1 + 257 * 33);
}

#[test]
fn unconverged_run_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), r#", "solver": {"max_iter": 2}"#);
    let out = dir.path().join("out");
    let o = graphmfg("solve-mfg", &cfg, &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("did not converge"));
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["converged"], false);
    assert!(out.join("trajectory.csv").is_file());
}

#[test]
fn compare_names_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let out = dir.path().join("out");
    assert_eq!(graphmfg("solve-mfg", &cfg, &out).status.code(), Some(0));
    let o = graphmfg("compare", &cfg, &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("characteristics.csv"), "{}", stderr(&o));
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["status"], 1);
    assert!(manifest["error"].as_str().unwrap().contains("characteristics.csv"));
}

#[test]
fn invalid_configs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = config(dir.path(), r#", "solver": {"damping": 1.5}"#);
    let o = graphmfg("solve-mfg", &cfg, &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("solver.damping"), "{}", stderr(&o));

    let four = dir.path().join("four.json");
    fs::write(
        &four,
        r#"{"graph": {"nodes": 4, "edges": [[1,2],[2,3],[3,4],[4,1]]},
            "coupling": {"family": "crowd_aversion"}, "planning": {"enabled": true}}"#,
    )
    .unwrap();
    let o = graphmfg("solve-planning", &four, &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("N <= 3"), "{}", stderr(&o));

    let o = graphmfg("solve-mfg", &dir.path().join("absent.json"), &out);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn planning_subcommand_requires_enabled_planning() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"graph": {"nodes": 2, "edges": [[1, 2], [2, 1]]}, "coupling": {"family": "crowd_aversion"}}"#).unwrap();
    let o = graphmfg("solve-planning", &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("planning.enabled"), "{}", stderr(&o));
}

#[test]
fn graph_file_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("ring.json"), r#"{"nodes": 3, "edges": [[1, 2], [2, 3], [3, 1]]}"#).unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(
        &cfg,
        r#"{"graph": "ring.json", "coupling": {"family": "affine_mix", "a": 1, "c": 0.5},
            "cost": {"type": "power", "exponent": 3}, "initial_distribution": [0.5, 0.3, 0.2], "time_steps": 100}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_graphmfg"))
        .args(["solve-mfg", "--seed", "7", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(json(&out.join("manifest.json"))["seed"], 7);
    let o = graphmfg("verify-nash", &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(json(&out.join("nash.json"))["max_gap"].as_f64().unwrap() <= 1e-6);
}
