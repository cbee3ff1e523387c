use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn q5_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/assets/transcripts/q5")
}

fn fedforge(home: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedforge"))
        .args(args)
        .env("FEDFORGE_HOME", home)
        .env("FEDFORGE_SYNTAX", "grammar")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn run_id(o: &Output) -> String {
    stdout(o).lines().next().unwrap().strip_prefix("started ").unwrap().to_string()
}

#[test]
fn offline_q5_matches_golden() {
    let home = tempfile::tempdir().unwrap();
    let out = fedforge(home.path(), &["run", "--query", "Q5", "--scripted", q5_dir().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("phase=Certified"));
    let id = run_id(&out);
    let events = std::fs::read_to_string(home.path().join("runs").join(&id).join("events.jsonl")).unwrap();
    let golden = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/q5.events.jsonl")).unwrap();
    assert_eq!(events, golden);

    let status = fedforge(home.path(), &["status", &id]);
    let snap: serde_json::Value = serde_json::from_slice(&status.stdout).unwrap();
    assert_eq!(snap["phase"], "Certified");

    let again = fedforge(home.path(), &["resume", &id]);
    assert!(again.status.success());
    let after = std::fs::read_to_string(home.path().join("runs").join(&id).join("events.jsonl")).unwrap();
    assert_eq!(after, golden);
}

#[test]
fn stops_at_review_without_scripted_user() {
    let home = tempfile::tempdir().unwrap();
    let script = home.path().join("script");
    std::fs::create_dir_all(&script).unwrap();
    for e in std::fs::read_dir(q5_dir()).unwrap() {
        let e = e.unwrap();
        if !e.file_name().to_string_lossy().starts_with("user.") {
            std::fs::copy(e.path(), script.join(e.file_name())).unwrap();
        }
    }
    let out = fedforge(home.path(), &["run", "--query", "Q5", "--scripted", script.to_str().unwrap(), "--t-max", "3"]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("awaiting=plan_review"), "{}", stdout(&out));
    let id = run_id(&out);
    let revise = fedforge(home.path(), &["revise", &id]);
    assert!(!revise.status.success());
    let approve = fedforge(home.path(), &["approve", &id]);
    assert!(approve.status.success(), "{}", String::from_utf8_lossy(&approve.stderr));
    assert!(stdout(&approve).contains("phase=Certified"));
    let status = fedforge(home.path(), &["status", &id]);
    let snap: serde_json::Value = serde_json::from_slice(&status.stdout).unwrap();
    assert_eq!(snap["config"]["t_max"], 3);
}

#[test]
fn unknown_query_fails() {
    let home = tempfile::tempdir().unwrap();
    let out = fedforge(home.path(), &["run", "--query", "Q99", "--scripted", q5_dir().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown-query"));
}

#[test]
fn bench_validate_passes() {
    let home = tempfile::tempdir().unwrap();
    let out = fedforge(home.path(), &["bench", "validate"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("16 entries, 0 invalid"));
    assert_eq!(text.lines().filter(|l| l.starts_with("ok ")).count(), 16);
}
