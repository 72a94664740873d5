use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use mmsbr::config::{HyperParams, Variant};
use mmsbr::model::init_params;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

const SMALL: [&str; 6] = [
    "n_items=40",
    "n_categories=4",
    "n_sessions=300",
    "d=8",
    "epochs=2",
    "batch=32",
];

fn mmsbr(args: &[&str], sets: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mmsbr"));
    cmd.args(args).env("MMSBR_THREADS", "1");
    for s in SMALL.iter().chain(sets) {
        cmd.args(["--set", s]);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn hash(path: &Path) -> String {
    let bytes = fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn synth(dir: &Path, seed: &str) {
    ok(mmsbr(&["synth", "--seed", seed, "--out", dir.to_str().unwrap()], &[]));
}

#[test]
fn synth_writes_the_manifest_and_is_seeded() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, "7");
    synth(&b, "7");
    let manifest = fs::read_to_string(a.join("manifest.csv")).unwrap();
    assert!(manifest.starts_with("file,rows,cols\n"));
    assert!(manifest.contains("items.csv,40,4"));
    for line in manifest.lines().skip(1) {
        let file = line.split(',').next().unwrap();
        assert_eq!(hash(&a.join(file)), hash(&b.join(file)), "{file}");
    }
    let c = tmp.path().join("c");
    synth(&c, "8");
    assert_ne!(hash(&a.join("interactions.csv")), hash(&c.join("interactions.csv")));
}

#[test]
fn unknown_key_names_the_key() {
    let out = mmsbr(&["synth"], &["no_such_key=3"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn train_eval_round_trip() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "3");
    let run = tmp.path().join("run");
    let dirs = ["--data", data.to_str().unwrap(), "--out", run.to_str().unwrap()];

    let start = Instant::now();
    ok(mmsbr(&[&["train"][..], &dirs].concat(), &[]));
    assert!(start.elapsed() < Duration::from_secs(60), "{:?}", start.elapsed());
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");

    let stdout = ok(mmsbr(&[&["eval"][..], &dirs].concat(), &[]));
    assert!(stdout.starts_with("variant,split,k,prec,mrr\n"));
    assert!(stdout.contains("full,test,20,"));
    assert!(stdout.contains("popularity,test_plus,10,"));
    assert!(run.join("buckets.csv").exists());

    // same seed, same log
    let again = tmp.path().join("again");
    ok(mmsbr(&["train", "--data", data.to_str().unwrap(), "--out", again.to_str().unwrap()], &[]));
    assert_eq!(hash(&run.join("train_log.csv")), hash(&again.join("train_log.csv")));
    assert_eq!(hash(&run.join("checkpoint.ckpt")), hash(&again.join("checkpoint.ckpt")));
}

#[test]
fn zero_learning_rate_keeps_the_initial_parameters() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "4");
    let run = tmp.path().join("run");
    ok(mmsbr(
        &["train", "--seed", "4", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap()],
        &["lr=0", "precision=f64"],
    ));
    let h = HyperParams {
        d: 8,
        seed: 4,
        ..HyperParams::default()
    };
    let init = init_params(&h, Variant::Full, 4, 4).unwrap();
    let mut expected = Vec::new();
    init.write_checkpoint(&mut expected).unwrap();
    assert!(fs::read(run.join("checkpoint.ckpt")).unwrap() == expected);
}

#[test]
fn eval_without_a_checkpoint_fails() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "5");
    let out = mmsbr(
        &["eval", "--data", data.to_str().unwrap(), "--out", tmp.path().join("none").to_str().unwrap()],
        &[],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing checkpoint"));
}

#[test]
fn ablate_reports_every_variant() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "6");
    let run = tmp.path().join("run");
    let stdout = ok(mmsbr(
        &["ablate", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap()],
        &["epochs=1"],
    ));
    let rows: Vec<&str> = stdout.lines().skip(1).collect();
    assert_eq!(rows.len(), 8, "{stdout}");
    assert!(rows[0].starts_with("full,"));
    assert!(run.join("metrics.csv").exists());
}

#[test]
fn gradcheck_passes() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "2");
    let stdout = ok(mmsbr(
        &["gradcheck", "--data", data.to_str().unwrap(), "--out", tmp.path().join("gc").to_str().unwrap()],
        &[],
    ));
    assert!(stdout.contains("prob.price"), "{stdout}");
    assert!(!stdout.contains("FAIL"), "{stdout}");
}
