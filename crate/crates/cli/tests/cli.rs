use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
name = "cli"
seed = 2

[dataset]
kind = "synthetic"
shape = [1, 8, 8]
num_classes = 3
per_class = 4

[federation]
num_clients = 4

[attack]
max_iterations = 20

[campaign]
images_per_cell = 2
"#;

fn fedleak(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedleak")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn run_writes_report_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "ok.toml", CONFIG);
    let out = dir.path().join("out");
    let res = fedleak(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["report.csv", "report.jsonl", "provenance.json", "rounds.jsonl"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn seed_override_changes_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "ok.toml", CONFIG);
    let out = dir.path().join("out");
    let res = fedleak(&["--seed", "77", "run", &cfg, "--out", out.to_str().unwrap()]);
    assert!(res.status.success());
    let prov: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["seeds"], serde_json::json!([77]));
}

#[test]
fn failing_cell_gives_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", &format!("{CONFIG}\n[sweep]\nbatch_size = [1, 9]\n"));
    let out = dir.path().join("out");
    let res = fedleak(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.contains(",error,"));
}

#[test]
fn invalid_config_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "typo.toml", &CONFIG.replace("[attack]", "[attack]\nmax_iters = 3"));
    let res = fedleak(&["run", &cfg]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("max_iters"));
}

#[test]
fn verify_theorem_reports_json() {
    let res = fedleak(&["verify-theorem", "--dim", "5", "--trials", "4", "--tmax", "30"]);
    assert!(res.status.success());
    let report: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(report["dim"], 5);
    assert!(report["max_ratio"].as_f64().unwrap() < 1.0);
}

#[test]
fn attack_one_dumps_trace_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "ok.toml", CONFIG);
    let dump = dir.path().join("dump");
    let res = fedleak(&["attack-one", &cfg, "--image-index", "1", "--dump-dir", dump.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let trace = std::fs::read_to_string(dump.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("iteration,distance"));
    assert!(trace.lines().count() >= 2);
    for f in ["truth_s0.pnm", "final_s0.pnm", "iter0000_s0.pnm", "summary.json"] {
        assert!(dump.join(f).is_file(), "{f}");
    }
    let pgm = std::fs::read(dump.join("truth_s0.pnm")).unwrap();
    assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dump.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["client"], 1);

    let missing = fedleak(&["attack-one", &cfg, "--image-index", "9", "--dump-dir", dump.to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));
}
