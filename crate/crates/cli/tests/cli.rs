//! End-to-end behaviour of the `scenario-forecast` binary: exit codes,
//! artifacts and determinism.

use std::path::Path;
use std::process::{Command, Output};

use chrono::{Duration, NaiveDate};

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scenario-forecast"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("exited normally")
}

fn synth(out: &Path, days: usize, profiles: usize, seed: u64) -> std::path::PathBuf {
    let output = run(
        &[
            "synth",
            "--set",
            &format!("synth.days={days}"),
            "--set",
            &format!("synth.profiles={profiles}"),
            "--seed",
            &seed.to_string(),
        ],
        out,
    );
    assert_eq!(code(&output), 0, "{}", String::from_utf8_lossy(&output.stderr));
    out.join("synthetic.csv")
}

#[test]
fn missing_input_file_exits_with_input_code() {
    let dir = tempfile::tempdir().unwrap();
    let output = run(&["ingest", "--set", "data.path=/nonexistent/sensors.csv"], dir.path());
    assert_eq!(code(&output), 2);
}

#[test]
fn invalid_configuration_exits_with_input_code() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["ingest", "--set", "library.k_mx=4"], dir.path())), 2);
    assert_eq!(code(&run(&["ingest", "--set", "train_ratio=2"], dir.path())), 2);
}

#[test]
fn too_few_days_to_cluster_exits_with_clustering_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 2, 2, 0);
    let output = run(
        &["cluster", "--set", &format!("data.path={}", data.display())],
        dir.path(),
    );
    assert_eq!(code(&output), 3, "{}", String::from_utf8_lossy(&output.stderr));
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let read = |sub: &str, seed: u64| {
        let out = dir.path().join(sub);
        std::fs::create_dir_all(&out).unwrap();
        let path = synth(&out, 6, 2, seed);
        (
            std::fs::read(path).unwrap(),
            std::fs::read(out.join("labels.csv")).unwrap(),
        )
    };
    let a = read("a", 4);
    let b = read("b", 4);
    let c = read("c", 5);
    assert!(a == b);
    assert!(a.0 != c.0);
}

#[test]
fn train_then_predict_one_day() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let data = synth(out, 10, 2, 1);
    let data_arg = format!("data.path={}", data.display());
    let small = [
        "--set",
        data_arg.as_str(),
        "--set",
        "library.k_max=3",
        "--set",
        "library.gp.population=60",
        "--set",
        "library.gp.generations=4",
    ];

    let mut train = vec!["train"];
    train.extend(small);
    let output = run(&train, out);
    assert_eq!(code(&output), 0, "{}", String::from_utf8_lossy(&output.stderr));
    for artifact in ["library.json", "training_log.json", "timing.json"] {
        assert!(out.join(artifact).exists(), "{artifact}");
    }

    let labels = std::fs::read_to_string(out.join("labels.csv")).unwrap();
    let last: NaiveDate = labels
        .lines()
        .last()
        .unwrap()
        .split(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();

    let mut predict = vec!["predict"];
    predict.extend(small);
    let output = run(&predict, out);
    assert_eq!(code(&output), 0, "{}", String::from_utf8_lossy(&output.stderr));
    let csv = std::fs::read_to_string(out.join(format!("forecast_{last}.csv"))).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("timestamp,observed,predicted,abs_error"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 288);
    assert!(rows
        .iter()
        .all(|r| r.split(',').nth(2).unwrap().parse::<f64>().unwrap().is_finite()));
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join(format!("forecast_{last}.json"))).unwrap()).unwrap();
    assert_eq!(meta["refit"], true);

    let mut no_refit = predict.clone();
    no_refit.push("--no-refit");
    assert_eq!(code(&run(&no_refit, out)), 0);
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join(format!("forecast_{last}.json"))).unwrap()).unwrap();
    assert_eq!(meta["refit"], false);

    // The day after the data ends has no outdoor temperature or power.
    let beyond = (last + Duration::days(1)).to_string();
    let mut missing = predict.clone();
    missing.extend(["--date", beyond.as_str()]);
    assert_eq!(code(&run(&missing, out)), 5);
}
