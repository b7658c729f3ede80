use serde_json::Value;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_concept-kernel"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn error_line(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {text:?}");
    serde_json::from_str(lines[0]).expect("error line is JSON")
}

#[test]
fn entropy_run_writes_its_report() {
    let dir = tempfile::tempdir().unwrap();
    assert!(
        run(dir.path(), &["--out-dir", "o", "synth-bench", "--no-run"])
            .status
            .success()
    );
    let out = run(
        dir.path(),
        &[
            "--out-dir",
            "o",
            "entropy",
            "--samples",
            "o/bench/entropy_samples.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
    let rep: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("o/entropy.json")).unwrap())
            .unwrap();
    assert_eq!(rep["subcommand"], "entropy");
    let h = rep["result"]["entropy"].as_f64().unwrap();
    assert!(h > 1.0 && h < 2.0, "{h}");
}

#[test]
fn unknown_subcommand_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_line(&out);
    assert_eq!(e["error"], "unknown_subcommand");
    assert!(e["message"].as_str().unwrap().contains("frobnicate"));
}

#[test]
fn missing_input_names_the_config_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["sae", "train"]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_line(&out);
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("paths.corpus"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"sae":{"n_concept":3}}"#).unwrap();
    let out = run(
        dir.path(),
        &["--config", "c.json", "synth-bench", "--no-run"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "config");
}

#[test]
fn invalid_flag_value_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &["entropy", "--samples", "x.jsonl", "--threshold", "abc"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "usage");
}

#[test]
fn synth_bench_is_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert!(
            run(d.path(), &["--seed", "11", "--out-dir", "o", "synth-bench"])
                .status
                .success()
        );
    }
    let names: Vec<_> = fs::read_dir(a.path().join("o/bench"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert!(names.len() >= 10);
    for n in names {
        let p = Path::new("o/bench").join(&n);
        assert_eq!(
            fs::read(a.path().join(&p)).unwrap(),
            fs::read(b.path().join(&p)).unwrap(),
            "{p:?}"
        );
    }
    assert_eq!(
        fs::read(a.path().join("o/synth-bench.json")).unwrap(),
        fs::read(b.path().join("o/synth-bench.json")).unwrap()
    );
}

#[test]
fn different_seeds_give_different_benchmarks() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(run(
        a.path(),
        &["--seed", "1", "--out-dir", "o", "synth-bench", "--no-run"]
    )
    .status
    .success());
    assert!(run(
        b.path(),
        &["--seed", "2", "--out-dir", "o", "synth-bench", "--no-run"]
    )
    .status
    .success());
    let f = "o/bench/ambiguity_corpus.jsonl";
    assert_ne!(
        fs::read(a.path().join(f)).unwrap(),
        fs::read(b.path().join(f)).unwrap()
    );
}
