use std::fs;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nullspace-reg"))
        .args(args)
        .output()
        .expect("binary runs")
}

#[test]
fn verify_filters_reports_json_and_exit_code() {
    let ok = run(&["verify-filters", "--filter", "tikhonov", "--mu", "1"]);
    assert!(ok.status.success());
    let doc: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(doc["pass"], true);
    assert_eq!(doc["rates"]["checks"][0]["name"], "c1_bounded");

    let fail = run(&["verify-filters", "--filter", "tikhonov", "--mu", "2"]);
    assert_eq!(fail.status.code(), Some(1));
    let doc: serde_json::Value = serde_json::from_slice(&fail.stdout).unwrap();
    assert_eq!(doc["pass"], false);

    assert!(run(&["verify-filters", "--filter", "landweber", "--mu", "2"]).status.success());
    assert_eq!(run(&["verify-filters", "--filter", "bogus", "--mu", "1"]).status.code(), Some(2));
}

#[test]
fn train_then_check_consistency() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let t = run(&[
        "train", "--problem", "random:8,12,5", "--epochs", "30", "--lr", "0.1", "--reg-weight", "0", "--seed", "2",
        "--mode", "exact", "--out", "net.json", "--out-dir", out,
    ]);
    assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));
    let history = fs::read_to_string(dir.path().join("loss_history.csv")).unwrap();
    assert_eq!(history.lines().next().unwrap(), "epoch,data_term,reg_term,total");
    assert_eq!(history.lines().count(), 32);

    let net = dir.path().join("net.json");
    let net = net.to_str().unwrap();
    let c = run(&["consistency", "--problem", "random:8,12,5", "--network", net, "--samples", "100", "--out-dir", out]);
    assert!(c.status.success(), "{}", String::from_utf8_lossy(&c.stderr));
    assert!(dir.path().join("consistency.json").exists());

    // different seed, different operator
    let bad = run(&[
        "consistency", "--problem", "random:8,12,5", "--problem-seed", "1", "--network", net, "--out-dir", out,
    ]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("integrity"));
}

#[test]
fn regularized_training_mode() {
    let dir = tempfile::tempdir().unwrap();
    let t = run(&[
        "train", "--problem", "random:6,9,4", "--epochs", "5", "--mode", "regularized:0.01", "--filter", "tsvd",
        "--out-dir", dir.path().to_str().unwrap(),
    ]);
    assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));
    let bad = run(&["train", "--mode", "fuzzy", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn rates_from_config_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("rates.json");
    fs::write(
        &cfg,
        r#"{"problem": {"kind": {"type": "random_rank_deficient", "m": 12, "n": 20, "rank": 8}, "seed": 3},
            "filter": {"family": {"kind": "tikhonov"}, "label": "tikhonov"},
            "smoothness_mu": 1.0,
            "trials_per_delta": 4}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let r = run(&["rates", "--config", cfg.to_str().unwrap(), "--trials", "3", "--out-dir", out.to_str().unwrap()]);
    assert!(r.status.code() == Some(0) || r.status.code() == Some(1));
    for f in ["rates.csv", "rates.json", "rates.svg"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("rates.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 7);
    assert_eq!(r.status.success(), report["pass"] == true);
    let csv = fs::read_to_string(out.join("rates.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "delta,worst_error,mean_error");

    let rejected = run(&["rates", "--config", cfg.to_str().unwrap(), "--mu", "2", "--out-dir", out.to_str().unwrap()]);
    assert_eq!(rejected.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&rejected.stderr).contains("c1_bounded"));
}

#[test]
fn converge_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let r = run(&["converge", "--problem", "random:12,20,8", "--trials", "2", "--out-dir", out]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stdout));
    let csv = fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
    assert_eq!(csv.lines().count(), 10);
}
