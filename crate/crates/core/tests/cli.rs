use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn sepgp(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sepgp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn read_summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn trace_rows(dir: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(dir.join("trace.csv")).unwrap();
    assert_eq!(
        r.headers().unwrap().iter().collect::<Vec<_>>(),
        ["step", "wall_time_s", "test_nll", "test_err"]
    );
    r.records().map(|x| x.unwrap()).collect()
}

#[test]
fn train_writes_all_artifacts_with_monotone_clock() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = sepgp(&[
        "train", "--method", "sep", "--synthetic", "400,2", "--m", "20", "--minibatch", "50", "--epochs", "2",
        "--synthetic-test", "200", "--out", out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = read_summary(dir.path());
    assert_eq!(summary["status"], "ok");
    assert_eq!(summary["s"], 50);
    let nll = summary["test_nll"].as_f64().unwrap();
    let err = summary["test_err"].as_f64().unwrap();
    assert!(nll >= 0.0 && (0.0..=1.0).contains(&err));

    let rows = trace_rows(dir.path());
    // 8 minibatches per epoch, 16 in all: the start plus every 25 steps plus the end.
    assert_eq!(rows.len(), 2);
    let times: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(times.windows(2).all(|w| w[1] >= w[0]));

    let state = sepgp::checkpoint::load(dir.path().join("checkpoint.json")).unwrap();
    assert_eq!(state.method, sepgp::Method::Sep);
    assert_eq!(state.hypers.num_inducing(), 20);
}

#[test]
fn batch_trace_has_one_row_per_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = sepgp(&[
        "train", "--method", "ep", "--synthetic", "120,2", "--m", "10", "--batch", "--iters", "6", "--synthetic-test",
        "50", "--out", out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = trace_rows(dir.path());
    assert_eq!(rows.len(), 7);
    let steps: Vec<u64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(steps, (0..=6).collect::<Vec<_>>());
    let times: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(times.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn zero_iterations_predicts_one_half() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = sepgp(&[
        "train", "--method", "ep", "--synthetic", "100,3", "--m", "10", "--iters", "0", "--out", out,
    ]);
    assert!(o.status.success());
    let nll = read_summary(dir.path())["test_nll"].as_f64().unwrap();
    assert!((nll - std::f64::consts::LN_2).abs() < 1e-12, "{nll}");
}

/// Everything except the wall-time fields must repeat byte for byte.
#[test]
fn identical_flags_give_identical_artifacts() {
    let runs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for d in &runs {
        let o = sepgp(&[
            "train", "--method", "adf", "--synthetic", "150,2", "--m", "12", "--iters", "4", "--seed", "9",
            "--synthetic-test", "60", "--out", d.path().to_str().unwrap(),
        ]);
        assert!(o.status.success());
    }
    let ck: Vec<String> = runs
        .iter()
        .map(|d| fs::read_to_string(d.path().join("checkpoint.json")).unwrap())
        .collect();
    assert_eq!(ck[0], ck[1]);

    let strip = |d: &Path| {
        let mut v = read_summary(d);
        v.as_object_mut().unwrap().remove("wall_time_s");
        v
    };
    assert_eq!(strip(runs[0].path()), strip(runs[1].path()));

    let cols = |d: &Path| -> Vec<(String, String, String)> {
        trace_rows(d)
            .iter()
            .map(|r| (r[0].to_string(), r[2].to_string(), r[3].to_string()))
            .collect()
    };
    assert_eq!(cols(runs[0].path()), cols(runs[1].path()));
}

#[test]
fn grid_writes_one_row_per_combination() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = sepgp(&[
        "grid", "--n-list", "60,90", "--m-list", "5,10%", "--methods", "ep,adf", "--seeds", "1,2,3", "--iters", "2",
        "--synthetic-test", "40", "--jobs", "2", "--out", out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut r = csv::Reader::from_path(dir.path().join("grid.csv")).unwrap();
    let rows: Vec<_> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 2 * 2 * 2 * 3);
}

#[test]
fn degenerate_grid_matches_train() {
    let grid_dir = tempfile::tempdir().unwrap();
    let train_dir = tempfile::tempdir().unwrap();
    let common = ["--iters", "3", "--synthetic-test", "50"];
    let mut g = vec![
        "grid", "--n-list", "80", "--m-list", "8", "--methods", "sep", "--seeds", "4", "--out",
        grid_dir.path().to_str().unwrap(),
    ];
    g.extend(common);
    let mut t = vec![
        "train", "--method", "sep", "--synthetic", "80,2", "--m", "8", "--seed", "4", "--out",
        train_dir.path().to_str().unwrap(),
    ];
    t.extend(common);
    assert!(sepgp(&g).status.success());
    assert!(sepgp(&t).status.success());

    let mut r = csv::Reader::from_path(grid_dir.path().join("grid.csv")).unwrap();
    let headers = r.headers().unwrap().clone();
    let row = r.records().next().unwrap().unwrap();
    let field = |name: &str| row[headers.iter().position(|h| h == name).unwrap()].to_string();
    let summary = read_summary(train_dir.path());
    assert_eq!(field("test_nll").parse::<f64>().unwrap(), summary["test_nll"].as_f64().unwrap());
    assert_eq!(field("test_err").parse::<f64>().unwrap(), summary["test_err"].as_f64().unwrap());
    assert_eq!(field("status"), "ok");
}

#[test]
fn exit_codes() {
    assert_eq!(sepgp(&["train", "--minibatch"]).status.code(), Some(1));
    assert_eq!(sepgp(&["train", "--method", "sep"]).status.code(), Some(1));
    assert_eq!(
        sepgp(&["train", "--data", "/nonexistent/file.csv", "--out", "/tmp"]).status.code(),
        Some(3)
    );
}

#[test]
fn verify_flag_reports_passing_oracles() {
    let dir = tempfile::tempdir().unwrap();
    let o = sepgp(&[
        "train", "--verify", "--synthetic", "30,2", "--m", "5", "--iters", "1", "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let first = String::from_utf8_lossy(&o.stdout).lines().next().unwrap().to_string();
    let report: Value = serde_json::from_str(&first).unwrap();
    assert_eq!(report["passed"], true);
}

#[test]
fn pima_loads_from_csv() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/pima.csv");
    let raw = sepgp::data::load_csv(&path, &sepgp::data::LabelColumn::Last, true).unwrap();
    assert_eq!((raw.len(), raw.dim()), (768, 8));
    assert_eq!(raw.class_counts(), (500, 268));
}
