use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_psap");

const SMOKE: &str = r#"
name = "smoke"
[trace]
kind = "poisson"
num_shards = 4
base_rate = 150.0
duration = 500
[sim]
policy = "static"
blocks = 500
"#;

/// Small hotspot scenario with a policy trained in seconds.
const TINY: &str = r#"
name = "tiny"
[trace]
kind = "hotspot"
num_shards = 4
base_rate = 150.0
duration = 300
[trace.attack]
start = 100
[sim]
policy = "psap"
blocks = 300
policy_checkpoint = "models/policy.ckpt"
[policy]
episodes = 1
blocks = 200
"#;

fn psap(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut c = Command::new(BIN);
    c.args(args).env_remove("PSAP_OUT");
    if let Some(o) = env_out {
        c.env("PSAP_OUT", o);
    }
    c.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn scenario(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(format!("{name}.toml"));
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn smoke_run_writes_one_record_per_block() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario(dir.path(), "smoke", SMOKE);
    let out = dir.path().join("out");
    let o = psap(&["run", "--scenario", s(&sc), "--out", s(&out)], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let audit = fs::read_to_string(out.join("static/audit.jsonl")).unwrap();
    assert_eq!(audit.lines().count(), 500);
    let csv = fs::read_to_string(out.join("static/records.csv")).unwrap();
    assert_eq!(csv.lines().count(), 501);
    assert!(out.join("static/manifest.json").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = scenario(dir.path(), "bad", "[trace.attack]\nfraction = 1.5\n");
    let o = psap(&["generate", "--scenario", s(&bad), "--out", s(dir.path())], None);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("fraction"));
    let typo = scenario(dir.path(), "typo", "[sim]\nblokcs = 3\n");
    assert_eq!(code(&psap(&["config", "--scenario", s(&typo)], None)), 2);
    let o = psap(&["run", "--scenario", s(&scenario(dir.path(), "smoke", SMOKE)), "--policy", "oracle"], None);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario(dir.path(), "tiny", TINY);
    let o = psap(&["run", "--scenario", s(&sc), "--out", s(&dir.path().join("o"))], None);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("policy_checkpoint"));
}

#[test]
fn seed_flag_changes_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario(dir.path(), "smoke", SMOKE);
    let digest = |seed: &str, out: &str| {
        let out = dir.path().join(out);
        let o = psap(&["generate", "--scenario", s(&sc), "--seed", seed, "--out", s(&out)], None);
        assert_eq!(code(&o), 0);
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("trace_manifest.json")).unwrap()).unwrap();
        m["digest"].as_str().unwrap().to_string()
    };
    let a = digest("5", "a");
    assert_eq!(a, digest("5", "b"));
    assert_ne!(a, digest("6", "c"));
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario(dir.path(), "smoke", SMOKE);
    let root = dir.path().join("root");
    let o = psap(&["generate", "--scenario", s(&sc), "--format", "jsonl"], Some(&root));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(root.join("smoke/trace.jsonl").exists());
    let explicit = dir.path().join("explicit");
    psap(&["generate", "--scenario", s(&sc), "--out", s(&explicit)], Some(&root));
    assert!(explicit.join("trace.csv").exists());
}

#[test]
fn report_summarizes_and_flags_breaches() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario(dir.path(), "smoke", SMOKE);
    let out = dir.path().join("out");
    assert_eq!(code(&psap(&["run", "--scenario", s(&sc), "--out", s(&out), "--format", "jsonl"], None)), 0);
    let run = out.join("static");
    let o = psap(&["report", s(&run), "--format", "jsonl"], None);
    assert_eq!(code(&o), 0);
    let line: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(line["policy"], "static");
    assert_eq!(line["summary"]["blocks"], 500);

    let audit = run.join("audit.jsonl");
    let text = fs::read_to_string(&audit).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut rec: serde_json::Value = serde_json::from_str(&lines[42]).unwrap();
    rec["breach"] = serde_json::Value::String("tampered".into());
    lines[42] = rec.to_string();
    fs::write(&audit, lines.join("\n") + "\n").unwrap();
    let o = psap(&["report", s(&run)], None);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("tampered"));
}

#[test]
fn paired_policy_runs_share_one_trace() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario(dir.path(), "tiny", TINY);
    let models = dir.path().join("models");
    let o = psap(&["train", "policy", "--scenario", s(&sc), "--out", s(&models)], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("runs");
    let o = psap(&["run", "--scenario", s(&sc), "--out", s(&out), "--policy", "psap,static", "--jobs", "2"], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let digest = |p: &str| {
        let m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join(p).join("manifest.json")).unwrap()).unwrap();
        m["final_state"]["trace_digest"].as_str().unwrap().to_string()
    };
    assert_eq!(digest("psap"), digest("static"));
}
