//! The `gdr2` binary: exit codes, determinism and the files it writes.

use std::path::Path;
use std::process::{Command, Output};

use gdr2_cli::commands::decode::{generate, state_from_file, Checkpoint};
use gdr2_cli::report::read_series;
use gdr2_cli::tensor_io::TensorFile;
use gdr2_cli::{Report, Status};
use gdr2_core::layer::{DecodeState, LayerConfig};

fn gdr2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gdr2")).args(args).output().expect("binary runs")
}

fn report(out: &Output) -> Report {
    String::from_utf8(out.stdout.clone()).unwrap().parse().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn reductions_pass_and_are_deterministic() {
    let a = gdr2(&["check-reductions", "--seed", "5"]);
    let b = gdr2(&["check-reductions", "--seed", "5"]);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stdout));
    assert_eq!(a.stdout, b.stdout);
    let r = report(&a);
    assert!(r.count(Status::Pass) > 0 && r.all_pass());
    assert_ne!(gdr2(&["check-reductions", "--seed", "6"]).stdout, a.stdout);
}

#[test]
fn narrowed_equivalence_writes_its_records_as_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "eq.cfg", "L = 33\nC = 16\nd_k = 4\nd_v = 4\n");
    let csv = dir.path().join("eq.csv");
    let out = gdr2(&["check-equivalence", "--config", &cfg, "--precision", "f64", "--csv", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let r = report(&out);
    assert!(r.suite("equivalence").all(|x| x.case.contains("L=33") && x.case.contains("f64")));
    let lines = std::fs::read_to_string(&csv).unwrap().lines().count();
    assert_eq!(lines, r.records.len() + 1);
}

#[test]
fn usage_and_input_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.cfg", "seed = 1\nwidth = 3\n");
    let out = gdr2(&["check-reductions", "--config", &bad]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    assert_eq!(gdr2(&["check-gradients", "--precision", "f32"]).status.code(), Some(2));
    assert_eq!(gdr2(&["check-gradients", "--precision", "f16"]).status.code(), Some(2));
    let missing = dir.path().join("none.cfg");
    assert_eq!(gdr2(&["bench", "--config", missing.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn bench_writes_a_series_and_only_asserts_the_long_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "b.cfg", "L = 256\nC = 16\nd_k = 16\nd_v = 16\nreps = 1\n");
    let csv = dir.path().join("b.csv");
    let out = gdr2(&["bench", "--config", &cfg, "--csv", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let rows = read_series(&csv).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.len == 256 && r.seconds > 0.0));
    let r = report(&out);
    assert_eq!(r.count(Status::Pass) + r.count(Status::Fail), 0);
}

#[test]
fn short_training_run_reports_its_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "r.cfg", "steps = 2\nbatch = 2\nlr = 1e-2\n");
    let out = gdr2(&["train-recall", "--config", &cfg]);
    let r = report(&out);
    let base = r.suite("recall").find(|x| x.metric == "abs(initial_ce-lnV)").unwrap();
    assert_eq!(base.status, Status::Pass);
    let reduction = r.suite("recall").find(|x| x.metric == "ce_reduction").unwrap();
    assert_eq!(out.status.code(), Some(if reduction.status == Status::Pass { 0 } else { 1 }));
}

#[test]
fn decode_matches_the_library_and_dumps_its_state() {
    let dir = tempfile::tempdir().unwrap();
    let config = LayerConfig::default();
    let ckpt = Checkpoint::<f64>::random(config, 16, 11).unwrap();
    let params = dir.path().join("ckpt.gdr2");
    ckpt.to_file().write(&params).unwrap();
    let prompt = write(dir.path(), "prompt.txt", "3 1 4 1 5 9 2 6\n");
    let state = dir.path().join("state.gdr2");
    let out = gdr2(&[
        "decode",
        "--params",
        params.to_str().unwrap(),
        "--prompt",
        &prompt,
        "--steps",
        "6",
        "--state-out",
        state.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let expected = generate(&ckpt, &[3, 1, 4, 1, 5, 9, 2, 6], 6).unwrap();
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    let generated: Vec<usize> = text
        .lines()
        .find_map(|l| l.strip_prefix("# generated "))
        .unwrap()
        .split_whitespace()
        .map(|t| t.parse().unwrap())
        .collect();
    assert_eq!(generated, expected.generated);
    let dumped: DecodeState<f64> = state_from_file(&TensorFile::read(&state).unwrap(), &config).unwrap();
    assert_eq!(dumped, expected.state);
    assert!(report(&out).all_pass());

    let bad = write(dir.path(), "bad.txt", "3 1 99\n");
    let out = gdr2(&["decode", "--params", params.to_str().unwrap(), "--prompt", &bad]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte 4"));
}

#[test]
fn zero_step_decode_state_is_the_prompt_state() {
    let dir = tempfile::tempdir().unwrap();
    let config = LayerConfig::default();
    let ckpt = Checkpoint::<f32>::random(config, 16, 12).unwrap();
    let params = dir.path().join("ckpt.gdr2");
    ckpt.to_file().write(&params).unwrap();
    let prompt = write(dir.path(), "p.txt", "7");
    let state = dir.path().join("s.gdr2");
    let out = gdr2(&[
        "decode",
        "--params",
        params.to_str().unwrap(),
        "--prompt",
        &prompt,
        "--state-out",
        state.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let dumped: DecodeState<f32> = state_from_file(&TensorFile::read(&state).unwrap(), &config).unwrap();
    assert_eq!(dumped, generate(&ckpt, &[7], 0).unwrap().state);
    let forced = gdr2(&["decode", "--precision", "f64", "--params", params.to_str().unwrap(), "--prompt", &prompt]);
    assert_eq!(forced.status.code(), Some(2));
}
