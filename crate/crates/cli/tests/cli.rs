use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn qmann(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qmann"))
        .args(args)
        .env_remove("QMANN_BABI_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = qmann(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn train(dir: &Path, extra: &[&str]) {
    let out = dir.to_str().unwrap();
    let mut args = vec!["train", "--task", "synthetic:single-fact", "--n-train", "300", "--n-test", "200", "--out", out];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn float_training_fits_single_fact_and_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("float");
    train(&run, &["--mode", "float", "--seed", "0", "--epochs", "30"]);
    for f in ["config.json", "checkpoint.json", "metrics.jsonl", "metrics.json", "curves.csv", "histograms.csv", "energy.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let m = json(&run.join("metrics.json"));
    assert_eq!(m["final_errors"]["train_err"], 0.0);
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 30);
    assert!(fs::read_to_string(run.join("curves.csv")).unwrap().starts_with("epoch,split,error\n"));
    assert!(fs::read_to_string(run.join("histograms.csv")).unwrap().starts_with("step,bin_lo,bin_hi,count\n"));
}

#[test]
fn eval_reproduces_the_training_test_error() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("q");
    train(&run, &["--mode", "fixed", "--qformat", "Q2.5", "--similarity", "hamming", "--mq", "--epochs", "4"]);
    let recorded = json(&run.join("metrics.json"))["final_errors"]["test_err"].as_f64().unwrap();
    let out = ok(&["eval", "--run", run.to_str().unwrap()]);
    let printed: f64 = out.trim().trim_start_matches("test error ").trim_end_matches('%').parse().unwrap();
    assert_eq!(printed, recorded);
}

#[test]
fn identical_runs_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let flags = ["--mode", "fixed", "--qformat", "Q5.2", "--act", "binary", "--es", "--seed", "4", "--epochs", "3"];
    train(&a, &flags);
    train(&b, &flags);
    for f in ["metrics.json", "checkpoint.json", "metrics.jsonl", "energy.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn fixed_point_run_saves_energy_over_float() {
    let tmp = tempfile::tempdir().unwrap();
    let (f, q) = (tmp.path().join("f"), tmp.path().join("q"));
    train(&f, &["--mode", "float", "--epochs", "1"]);
    train(&q, &["--mode", "fixed", "--qformat", "Q5.2", "--epochs", "1"]);
    let out = ok(&["energy", "--run", q.to_str().unwrap(), "--baseline", f.to_str().unwrap()]);
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    let gain = report["gain_vs_baseline"].as_f64().unwrap();
    assert!(gain > 15.0, "gain {gain}");
    let own = json(&q.join("energy.json"))["gain_vs_baseline"].as_f64().unwrap();
    assert!((own - gain).abs() < 1e-9 * gain);
}

#[test]
fn sweep_emits_one_row_per_format() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let stdout = ok(&[
        "sweep", "--task", "synthetic:single-fact", "--n-train", "200", "--n-test", "100", "--mode", "fixed",
        "--qformats", "Q5.4,Q2.7", "--seeds", "0,1", "--epochs", "2", "--out", out.to_str().unwrap(),
    ]);
    assert!(stdout.contains("Q5.4") && stdout.contains("Q2.7"), "{stdout}");
    let csv = fs::read_to_string(out.join("summary.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "qformat,avg_of_best,avg_of_mean,similarity_overflows,total_overflows");
    assert_eq!(lines.len(), 3);
    for row in &lines[1..] {
        let cols: Vec<f64> = row.split(',').skip(1).map(|c| c.parse().unwrap()).collect();
        assert!(cols[0] <= cols[1], "best above mean: {row}");
    }
}

#[test]
fn diag_prints_one_row_per_epoch() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("d");
    train(&run, &["--mode", "fixed", "--qformat", "Q2.7", "--epochs", "3"]);
    let out = ok(&["diag", "--run", run.to_str().unwrap()]);
    assert_eq!(out.lines().count(), 4);
}

#[test]
fn invalid_requests_fail_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let out = out.to_str().unwrap();
    let cases: [&[&str]; 4] = [
        &["train", "--task", "nonsense", "--out", out],
        &["train", "--task", "synthetic:single-fact", "--similarity", "hamming", "--out", out],
        &["train", "--task", "babi:1", "--out", out],
        &["train", "--task", "synthetic:single-fact", "--mode", "fixed", "--qformat", "Q9", "--out", out],
    ];
    for args in cases {
        let res = qmann(args);
        assert!(!res.status.success(), "{args:?} should fail");
        assert!(!res.stderr.is_empty());
    }
    assert!(!Path::new(out).join("metrics.json").exists());
}
