//! End-to-end tests of the binary: exit codes, determinism of the
//! benchmark outputs, and file round-trips.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sparseperf"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(dir)
        .env_remove("SPARSEPERF_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn synth(dir: &Path, name: &str) {
    let out = run(
        &[
            "synth", "--output", name, "--learners", "20", "--questions", "5", "--attempts", "4",
        ],
        dir,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_then_sparsity_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "d.csv");
    let out = run(&["sparsity", "--input", "d.csv"], tmp.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("max_attempts,sparsity"));
    let vals: Vec<f64> = lines
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(vals.len(), 4);
    // dropout grows with attempts, so sparsity must not decrease
    for w in vals.windows(2) {
        assert!(w[1] >= w[0], "{vals:?}");
    }
}

#[test]
fn sparsity_out_of_range_attempts_is_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "d.csv");
    let out = run(&["sparsity", "--input", "d.csv", "--attempts", "9"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_input_is_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["sparsity", "--input", "nope.csv"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_dataset_is_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("bad.csv"),
        "learner_id,question_id,attempt,outcome\nL1,Q1,zero,1\n",
    )
    .unwrap();
    let out = run(&["sparsity", "--input", "bad.csv"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn usage_error_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["impute", "--method", "tf"], tmp.path()); // missing --input
    assert_eq!(out.status.code(), Some(1));
    let help = run(&["--help"], tmp.path());
    assert_eq!(help.status.code(), Some(0));
}

#[test]
fn unknown_method_is_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "d.csv");
    let out = run(
        &["impute", "--input", "d.csv", "--method", "autoencoder"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn impute_writes_full_tensor_in_range_and_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "d.csv");
    let args = [
        "impute", "--input", "d.csv", "--method", "cpd", "--output", "a.csv", "--max-iters", "20",
        "--seed", "5",
    ];
    let out = run(&args, tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("effective config"));
    let text = fs::read_to_string(tmp.path().join("a.csv")).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 1 + 20 * 5 * 4);
    assert_eq!(rows[0], "u,i,m,value");
    for r in &rows[1..] {
        let v: f64 = r.split(',').nth(3).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&v), "{r}");
    }
    let mut args2 = args;
    args2[6] = "b.csv";
    assert!(run(&args2, tmp.path()).status.success());
    let again = fs::read_to_string(tmp.path().join("b.csv")).unwrap();
    assert_eq!(text, again);
}

const BENCH_CONFIG: &str = r#"
methods = ["tf", "cpd"]
attempts_range = [2, 3]
seed = 3

[[datasets]]
name = "demo"
[datasets.synth]
u_count = 20
n_count = 5
m_count = 3
seed = 3

[cv]
cycles = 1
folds = 3
base_seed = 3

[tf]
max_iterations = 15

[cpd]
max_iterations = 15
"#;

#[test]
fn benchmark_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("run.toml"), BENCH_CONFIG).unwrap();
    for dir in ["out1", "out2"] {
        let out = run(
            &["benchmark", "--config", "run.toml", "--output-dir", dir, "--jobs", "2"],
            tmp.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in [
        "rmse.csv",
        "spearman.csv",
        "sparsity.csv",
        "curves.csv",
        "report.txt",
        "effective_config.toml",
    ] {
        let a = fs::read(tmp.path().join("out1").join(name)).unwrap();
        let b = fs::read(tmp.path().join("out2").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between runs");
    }
    // shape contract: 2 methods × 1 dataset × 2 attempt settings
    let rmse = fs::read_to_string(tmp.path().join("out1/rmse.csv")).unwrap();
    assert_eq!(rmse.lines().count(), 1 + 4);
    let sp = fs::read_to_string(tmp.path().join("out1/spearman.csv")).unwrap();
    assert_eq!(sp.lines().count(), 1 + 2);
}

#[test]
fn benchmark_bad_config_is_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("run.toml"), "methods = [\"nope\"]\n").unwrap();
    let out = run(
        &["benchmark", "--config", "run.toml", "--output-dir", "out"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_output_ingests_back_with_same_dims() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "d.csv");
    // sparsity over the full range succeeds only if the file parses and
    // the tensor has the synthesized attempt depth
    let out = run(&["sparsity", "--input", "d.csv", "--attempts", "1,2,3,4"], tmp.path());
    assert!(out.status.success());
    // printed sparsity of synth matches the recomputed full-range value
    let synth_out = run(
        &[
            "synth", "--output", "e.csv", "--learners", "20", "--questions", "5", "--attempts",
            "4",
        ],
        tmp.path(),
    );
    let text = String::from_utf8(synth_out.stdout).unwrap();
    let printed: f64 = text
        .lines()
        .find(|l| l.starts_with("sparsity "))
        .unwrap()
        .split_whitespace()
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    let sp = run(&["sparsity", "--input", "e.csv", "--attempts", "4"], tmp.path());
    let recomputed: f64 = String::from_utf8(sp.stdout)
        .unwrap()
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!((printed - recomputed).abs() < 1e-12);
    // same seed, same bytes
    let a = fs::read(tmp.path().join("d.csv")).unwrap();
    let b = fs::read(tmp.path().join("e.csv")).unwrap();
    assert_eq!(a, b);
}
