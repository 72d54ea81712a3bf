use std::path::PathBuf;
use std::process::{Command, Output};

fn micro(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/data/micro").join(name).to_string_lossy().into_owned()
}

fn loghier(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loghier")).args(args).output().unwrap()
}

fn micro_args(owned: &[String; 3]) -> Vec<&str> {
    vec!["--templates", &owned[0], "--fixture", &owned[1], "--train", &owned[2]]
}

#[test]
fn detect_single_sequence_in_fixture_mode() {
    let owned = [micro("templates.csv"), micro("triples.csv"), micro("train.csv")];
    let (verdicts, test) = (micro("verdicts.csv"), micro("test.csv"));
    let mut args = vec!["detect"];
    args.extend(micro_args(&owned));
    args.extend(["--verdicts", &verdicts, "--test", &test, "--seq", "m11", "--mode", "fixture"]);
    let out = loghier(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let line = String::from_utf8(out.stdout).unwrap();
    let fields: Vec<&str> = line.trim_end().split('\t').collect();
    assert_eq!(&fields[..5], ["m11", "Anomaly", "level=S", "span=[2,4)", "llm_calls=1"]);
}

#[test]
fn eval_jsonl_ends_with_metrics() {
    let owned = [micro("templates.csv"), micro("triples.csv"), micro("train.csv")];
    let test = micro("test.csv");
    let mut args = vec!["eval"];
    args.extend(micro_args(&owned));
    args.extend(["--test", &test, "--format", "jsonl"]);
    let out = loghier(&args);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 21);
    let m: serde_json::Value = serde_json::from_str(lines[20]).unwrap();
    assert_eq!(m["metrics"]["llm_calls"], 0);
}

#[test]
fn train_on_empty_file_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let store = dir.path().join("kb.jsonl");
    let out = loghier(&["train", "--in", empty.to_str().unwrap(), "--store", store.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn exit_codes() {
    assert_eq!(loghier(&["detect", "--test", "x.csv", "--mode", "bogus"]).status.code(), Some(2));
    let out = loghier(&["detect", "--test", "/nonexistent/test.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error["));
}
