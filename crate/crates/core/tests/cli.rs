//! The `dynprop` binary: flags, exit codes and file outputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn dynprop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynprop"))
        .args(args)
        .env("DYNPROP_THREADS", "1")
        .output()
        .expect("spawn dynprop")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_data(dir: &TempDir) -> PathBuf {
    let data = dir.path().join("data");
    let out = dynprop(&["gen-data", "--out", s(&data), "--train", "16", "--val", "6", "--seed", "3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    data
}

fn small_model(dir: &TempDir, data: &Path, extra: &[&str]) -> PathBuf {
    let out_dir = dir.path().join("model");
    let mut args = vec!["train", "--data", s(data), "--out", s(&out_dir), "--steps", "2", "--batch", "2", "--dim", "16", "--force"];
    args.extend_from_slice(extra);
    let out = dynprop(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    out_dir.join("model.ckpt")
}

#[test]
fn help_lists_every_train_flag() {
    let out = dynprop(&["train", "--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    for flag in ["--mode", "--arch", "--proposals", "--theta", "--k", "--distill", "--steps", "--seed", "--data", "--out"] {
        assert!(text.contains(flag), "help misses {flag}");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(code(&dynprop(&["eval", "--bogus"])), 2);
    assert_eq!(code(&dynprop(&["frobnicate"])), 2);
}

#[test]
fn gen_data_defaults_and_determinism() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = dynprop(&["gen-data", "--out", s(d)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["train"], 2000);
    assert_eq!(manifest["val"], 500);
    for file in ["manifest.json", "train.jsonl", "val.jsonl"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }
    let lines = std::fs::read_to_string(a.join("val.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 500);
}

#[test]
fn gen_data_rejects_bad_arguments() {
    let dir = TempDir::new().unwrap();
    let out = dynprop(&["gen-data", "--out", s(&dir.path().join("x")), "--max-objects", "0"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--max-objects"));

    // A non-empty output directory needs --force.
    let data = small_data(&dir);
    assert_eq!(code(&dynprop(&["gen-data", "--out", s(&data), "--train", "4", "--val", "2"])), 2);
    assert_eq!(code(&dynprop(&["gen-data", "--out", s(&data), "--train", "4", "--val", "2", "--force"])), 0);
}

#[test]
fn invalid_training_combinations_are_rejected() {
    let dir = TempDir::new().unwrap();
    let data = small_data(&dir);
    let out = dir.path().join("m");
    let base = ["train", "--data", s(&data), "--out", s(&out), "--steps", "1"];
    let with = |extra: &[&str]| {
        let mut args = base.to_vec();
        args.extend_from_slice(extra);
        dynprop(&args)
    };
    let r = with(&["--mode", "switchable", "--distill", "on", "--arch", "two_stage"]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("--arch query"));
    assert_eq!(code(&with(&["--proposals", "30"])), 2, "30 is not divisible by theta 4");
    assert_eq!(code(&with(&["--mode", "switchable", "--oracle-count"])), 2);
    assert_eq!(code(&with(&["--proposals", "8", "--theta", "1", "--mode", "individual"])), 2, "fewer proposals than objects");
    assert!(!out.join("model.ckpt").exists());
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let out = dynprop(&["train", "--data", s(&dir.path().join("nope")), "--out", s(&dir.path().join("m"))]);
    assert_eq!(code(&out), 3);
}

#[test]
fn train_writes_checkpoint_log_and_config() {
    let dir = TempDir::new().unwrap();
    let data = small_data(&dir);
    let ckpt = small_model(&dir, &data, &["--mode", "dynamic"]);
    let model_dir = ckpt.parent().unwrap();
    let log = std::fs::read_to_string(model_dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("step,mode,"));
    let config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(model_dir.join("train.config.json")).unwrap()).unwrap();
    assert_eq!(config["command"], "train");
    assert_eq!(config["resolved"]["mode"], "dynamic");

    // Refusing to overwrite without --force.
    let again = dynprop(&["train", "--data", s(&data), "--out", s(model_dir), "--steps", "1", "--dim", "16"]);
    assert_eq!(code(&again), 2);
}

#[test]
fn eval_count_bench_and_sweep_emit_csvs() {
    let dir = TempDir::new().unwrap();
    let data = small_data(&dir);
    let ckpt = small_model(&dir, &data, &["--mode", "dynamic"]);
    let p = |name: &str| dir.path().join(name);

    let out = dynprop(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&p("eval.csv"))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = std::fs::read_to_string(p("eval.csv")).unwrap();
    let labels: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["0.25N", "0.50N", "0.75N", "1.00N"]);
    assert!(p("eval.csv.config.json").exists());

    let out = dynprop(&[
        "eval", "--ckpt", s(&ckpt), "--data", s(&data), "--proposals", "auto,10", "--sampling", "bin", "--out", s(&p("auto.csv")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(std::fs::read_to_string(p("auto.csv")).unwrap().lines().nth(1).unwrap().starts_with("auto,"));

    let out = dynprop(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--oracle-count", "--out", s(&p("oracle.csv"))]);
    assert_eq!(code(&out), 0);
    assert!(std::fs::read_to_string(p("oracle.csv")).unwrap().contains("\noracle,"));

    let out = dynprop(&["count", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&p("count.csv"))]);
    assert_eq!(code(&out), 0);
    assert!(std::fs::read_to_string(p("count.csv")).unwrap().starts_with("mae,acc4\n"));

    let out = dynprop(&[
        "bench", "--ckpt", s(&ckpt), "--data", s(&data), "--proposals", "10,40", "--images", "2", "--repeats", "1", "--out",
        s(&p("bench.csv")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read_to_string(p("bench.csv")).unwrap().lines().count(), 3);

    let out = dynprop(&[
        "sweep", "--ckpt", s(&ckpt), "--data", s(&data), "--from", "10", "--to", "40", "--step", "10", "--images", "2", "--out",
        s(&p("sweep.csv")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read_to_string(p("sweep.csv")).unwrap().lines().count(), 5);

    let bad = dynprop(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--proposals", "41", "--out", s(&p("x.csv"))]);
    assert_eq!(code(&bad), 2);
    let bad = dynprop(&["sweep", "--ckpt", s(&ckpt), "--data", s(&data), "--from", "20", "--to", "10", "--out", s(&p("x.csv"))]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn corrupt_checkpoint_names_the_record() {
    let dir = TempDir::new().unwrap();
    let data = small_data(&dir);
    let ckpt = small_model(&dir, &data, &[]);
    let bytes = std::fs::read(&ckpt).unwrap();
    let broken = dir.path().join("broken.ckpt");
    std::fs::write(&broken, &bytes[..bytes.len() - 5]).unwrap();
    let out = dynprop(&["eval", "--ckpt", s(&broken), "--data", s(&data), "--out", s(&dir.path().join("e.csv"))]);
    assert_eq!(code(&out), 4);
    let err = stderr(&out);
    assert!(err.contains("record ") && err.contains("truncated values"), "{err}");

    std::fs::write(&broken, b"not a checkpoint").unwrap();
    let out = dynprop(&["count", "--ckpt", s(&broken), "--data", s(&data), "--out", s(&dir.path().join("c.csv"))]);
    assert_eq!(code(&out), 4);
}

#[test]
fn training_and_eval_are_reproducible() {
    let dir = TempDir::new().unwrap();
    let data = small_data(&dir);
    let mut ckpts = Vec::new();
    let mut csvs = Vec::new();
    for i in 0..2 {
        let out_dir = dir.path().join(format!("run{i}"));
        let out = dynprop(&[
            "train", "--data", s(&data), "--out", s(&out_dir), "--steps", "3", "--batch", "2", "--dim", "16", "--seed", "9",
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let csv = out_dir.join("eval.csv");
        let ckpt = out_dir.join("model.ckpt");
        assert_eq!(code(&dynprop(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&csv)])), 0);
        ckpts.push(std::fs::read(ckpt).unwrap());
        csvs.push(std::fs::read(csv).unwrap());
    }
    assert_eq!(ckpts[0], ckpts[1]);
    assert_eq!(csvs[0], csvs[1]);
}
