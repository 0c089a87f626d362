use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Output, Stdio};

fn case(path: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../case-studies")
        .join(path)
        .to_string_lossy()
        .into_owned()
}

fn mfa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfa"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn validate_accepts_shipped_files() {
    for f in [
        "arps/arps.mfa",
        "trains/trains.mfa",
        "nvc/nvc.mfa",
        "ethics/ethics.mfa",
    ] {
        let o = mfa(&["validate", &case(f)]);
        assert!(o.status.success(), "{f}: {}", stderr(&o));
        assert!(stdout(&o).contains(": ok"));
    }
}

#[test]
fn validate_points_at_syntax_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.mfa");
    std::fs::write(
        &path,
        "automaton \"x\" {\n  state q user\n  edge q q\n  initial q\n}\n",
    )
    .unwrap();
    let o = mfa(&["validate", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("3:10: expected `->`"), "{err}");
    assert!(err.contains("  | ") && err.contains('^'), "{err}");
}

#[test]
fn validate_reports_structural_errors_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.mfa");
    std::fs::write(
        &path,
        "automaton \"x\" { state q user edge q -> q on ghost initial q }",
    )
    .unwrap();
    let o = mfa(&["validate", "--json", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["errors"][0]["code"], "UNKNOWN_TRIGGER");
}

#[test]
fn run_with_script_prints_the_dialogue() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.jsonl");
    let o = mfa(&[
        "run",
        &case("arps/arps.mfa"),
        "--script",
        &case("arps/user_table2.txt"),
        "--transcript",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(
        text.starts_with("> hello\nHello! How are you today?\n"),
        "{text}"
    );
    assert!(stderr(&o).contains("session ended: quit"));
    let transcript = std::fs::read_to_string(out).unwrap();
    let first: serde_json::Value =
        serde_json::from_str(transcript.lines().next().unwrap()).unwrap();
    assert_eq!(first["kind"], "user_input");
    assert_eq!(first["seq"], 0);
}

#[test]
fn run_fails_when_the_script_runs_out() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("short.txt");
    std::fs::write(&script, "hello\n").unwrap();
    let o = mfa(&[
        "run",
        &case("arps/arps.mfa"),
        "--script",
        script.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("SCRIPT_UNDERRUN"), "{}", stderr(&o));
}

#[test]
fn interactive_run_reads_stdin() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_mfa"))
        .args(["run", &case("ethics/ethics.mfa")])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all("Tunisian eat...\n".as_bytes())
        .unwrap();
    // end of input quits
    let o = child.wait_with_output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "Tunisians eat different meals.\n");
}

#[test]
fn run_writes_sinks_to_the_given_directory() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfa(&[
        "run",
        &case("trains/trains.mfa"),
        "--script",
        &case("trains/user_booking.txt"),
        "--sink-dir",
        dir.path().to_str().unwrap(),
        "--session-id",
        "cli-test",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let sink = std::fs::read_to_string(dir.path().join("booking.csv")).unwrap();
    assert_eq!(sink.lines().count(), 4);
    assert!(sink.contains("cli-test"));
}

#[test]
fn estimate_reports_chain_and_latency() {
    let o = mfa(&["estimate", &case("arps/arps.mfa"), "--cost-dialer", "0.6"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("max machine chain: 1"), "{text}");
    assert!(text.contains("estimated latency: 0.60 s"), "{text}");

    let o = mfa(&["estimate", "--json", &case("trains/trains.mfa")]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["max_machine_chain"]["finite"], 2);
}

#[test]
fn eval_trigger_prints_grid_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let o = mfa(&[
        "eval-trigger",
        "t_0",
        "--defs",
        &case("arps/arps.mfa"),
        "--dataset",
        &case("datasets/anger.csv"),
        "--distractors",
        &case("datasets/distractors.csv"),
        "--pct",
        "0",
        "--pct",
        "60",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let grid = stdout(&o);
    assert!(grid.starts_with("Trigger | % of random"), "{grid}");
    let reports: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 2);
    assert_eq!(reports[0]["dataset_size"], 100);
    assert_eq!(reports[1]["dataset_size"], 250);
    assert_eq!(reports[1]["distractor_pct"], 60.0);
}

#[test]
fn eval_trigger_rejects_unknown_trigger() {
    let o = mfa(&[
        "eval-trigger",
        "nope",
        "--defs",
        &case("arps/arps.mfa"),
        "--dataset",
        &case("datasets/anger.csv"),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no trigger `nope`"));
}
