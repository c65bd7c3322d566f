use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synkernel"))
        .arg("--data-dir")
        .arg(dir)
        .args(args)
        .env_remove("SYNKERNEL_DATA")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).trim().to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

#[test]
fn recall_on_empty_store_prints_empty_list() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--json", "recall", "--query", "anything"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(stdout(&out), "[]");
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn out_of_range_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["config", "set", "epsilon", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("epsilon"), "{}", stderr(&out));
    // The rejected value was not saved.
    let out = run(dir.path(), &["--json", "config", "show"]);
    let config: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(config["epsilon"], 0.1);
}

#[test]
fn corrupted_bundle_is_rejected_with_checksum_error() {
    let donor = tempfile::tempdir().unwrap();
    let out = run(
        donor.path(),
        &[
            "experience",
            "add",
            "--intent",
            "rotate the api keys",
            "--script",
            "vault rotate api",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let path = donor.path().join("out.bundle");
    let out = run(donor.path(), &["bundle", "export", "--out", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 5;
    bytes[last] ^= 0x01;
    std::fs::write(&path, &bytes).unwrap();

    let recipient = tempfile::tempdir().unwrap();
    let out = run(recipient.path(), &["bundle", "import", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("checksum"), "{}", stderr(&out));
    let out = run(recipient.path(), &["--json", "experience", "list"]);
    assert_eq!(stdout(&out), "[]");
}

#[test]
fn bundle_round_trip_between_data_dirs() {
    let donor = tempfile::tempdir().unwrap();
    run(
        donor.path(),
        &[
            "experience",
            "add",
            "--intent",
            "rotate the api keys",
            "--script",
            "vault rotate api",
        ],
    );
    let path = donor.path().join("b.bundle");
    run(donor.path(), &["bundle", "export", "--out", path.to_str().unwrap()]);
    let recipient = tempfile::tempdir().unwrap();
    let out = run(
        recipient.path(),
        &["--json", "bundle", "import", path.to_str().unwrap()],
    );
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["added"], 1);
    let out = run(recipient.path(), &["--json", "recall", "--query", "rotate api keys"]);
    let payload: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(payload[0]["script"], "vault rotate api");
}

#[test]
fn session_and_mailbox_state_survives_between_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(stdout(&run(d, &["session", "new", "--scope", "/proj"])), "1");
    assert_eq!(stdout(&run(d, &["session", "new", "--scope", "/proj"])), "2");
    run(d, &["session", "dag", "add", "1", "build"]);
    run(d, &["session", "dag", "add", "1", "test", "--dep", "build"]);
    let out = run(d, &["--json", "session", "dag", "complete", "1", "build"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("test"));

    run(d, &["mailbox", "send", "--from", "ops", "--to", "session:2", "first"]);
    run(d, &["mailbox", "send", "--from", "ops", "--to", "session:2", "second"]);
    let out = run(d, &["--json", "mailbox", "poll", "session:2"]);
    let msgs: Vec<serde_json::Value> = serde_json::from_str(&stdout(&out)).unwrap();
    let payloads: Vec<&str> = msgs.iter().map(|m| m["payload"].as_str().unwrap()).collect();
    assert_eq!(payloads, ["first", "second"]);
    assert_eq!(stdout(&run(d, &["--json", "mailbox", "poll", "session:2"])), "[]");
}

#[test]
fn agenda_item_fires_once_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(
        d,
        &["agenda", "add", "--at", "10", "--deliver", "home", "nightly cleanup"],
    );
    let early = run(d, &["--json", "agenda", "tick", "5"]);
    assert_eq!(stdout(&early), "[]");
    let due = run(d, &["--json", "agenda", "tick", "12"]);
    let fired: Vec<serde_json::Value> = serde_json::from_str(&stdout(&due)).unwrap();
    assert_eq!(fired.len(), 1);
    assert_eq!(stdout(&run(d, &["--json", "agenda", "tick", "20"])), "[]");
    let home = run(d, &["--json", "mailbox", "poll", "home"]);
    let msgs: Vec<serde_json::Value> = serde_json::from_str(&stdout(&home)).unwrap();
    assert_eq!(msgs.len(), 1);
    // Going back in time is refused.
    assert_eq!(run(d, &["agenda", "tick", "3"]).status.code(), Some(1));
}

#[test]
fn data_dir_env_var_overrides_flag() {
    let flag = tempfile::tempdir().unwrap();
    let env = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_synkernel"))
        .args(["--data-dir", flag.path().to_str().unwrap(), "session", "new"])
        .env("SYNKERNEL_DATA", env.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(env.path().join("VERSION").exists());
    assert!(!flag.path().join("VERSION").exists());
}

#[test]
fn simulate_and_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("traj.csv");
    let out = run(
        dir.path(),
        &[
            "simulate",
            "grow",
            "--families",
            "3",
            "--tasks",
            "20",
            "--epochs",
            "3",
            "--out",
            csv.to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(std::fs::read_to_string(&csv)
        .unwrap()
        .starts_with("epoch,success_rate,store_size\n"));
    let out = run(
        dir.path(),
        &["report", "--in", csv.to_str().unwrap(), "--format", "csv"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("start,best,gain_pp"));
    let out = run(dir.path(), &["report", "--in", csv.to_str().unwrap()]);
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(report["best"].as_f64().unwrap() >= report["start"].as_f64().unwrap());
}

#[test]
fn compact_keeps_records() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run(
        d,
        &[
            "experience",
            "add",
            "--intent",
            "rotate the api keys",
            "--script",
            "vault rotate api",
        ],
    );
    let out = run(d, &["--json", "compact"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let out = run(d, &["--json", "experience", "list"]);
    let records: Vec<serde_json::Value> = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(records.len(), 1);
}
