use std::path::PathBuf;
use std::process::Command;

fn kraken() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kraken"))
}

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

#[test]
fn sim_run_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let out = kraken()
        .args(["sim", "run"])
        .arg(scenario("baseline.json"))
        .arg("--report")
        .arg(&report)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["outcome"], "DONE");
    assert_eq!(r["result"]["VARIANCE[0]"], "14/3");
}

#[test]
fn sim_run_reports_abort() {
    let out = kraken().args(["sim", "run"]).arg(scenario("wrong_function.json")).output().unwrap();
    assert!(out.status.success());
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["outcome"], "ABORTED");
    assert!(r.get("result").is_none());
}

#[test]
fn seed_override_changes_the_transcript() {
    let run = |seed: &str| {
        let out = kraken().args(["sim", "run"]).arg(scenario("baseline.json")).args(["--seed", seed]).output().unwrap();
        let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        r["transcript_digest"].clone()
    };
    assert_eq!(run("1"), run("1"));
    assert_ne!(run("1"), run("2"));
}

#[test]
fn malformed_scenario_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"seed": 1, "surprise": true}"#).unwrap();
    let out = kraken().args(["sim", "run"]).arg(&path).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ConfigError"));
}

#[test]
fn init_creates_keys() {
    let dir = tempfile::tempdir().unwrap();
    let out = kraken()
        .arg("--deployment")
        .arg(dir.path())
        .args(["init", "--owners", "2", "--base", "127.0.0.1:7600"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("deployment.json").exists());
    for name in ["market", "storage", "dealer", "node-1", "node-2", "node-3", "consumer", "owner-0", "owner-1"] {
        assert!(dir.path().join("keys").join(format!("{name}.json")).exists(), "{name}");
    }
}
