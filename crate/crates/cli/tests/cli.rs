use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn quakerank(args: &[&str], runs: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quakerank"))
        .args(args)
        .env("QUAKERANK_RUNS", runs)
        .output()
        .expect("spawn quakerank")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn small_dataset(dir: &Path, runs: &Path) {
    let d = dir.to_str().unwrap();
    ok(&quakerank(
        &[
            "synth",
            "--out",
            d,
            "--seed",
            "3",
            "--n-train",
            "24",
            "--n-val",
            "8",
            "--n-test",
            "12",
        ],
        runs,
    ));
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn synth_without_out_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = quakerank(&["synth", "--seed", "7"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_is_byte_identical_across_invocations() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    small_dataset(&a, tmp.path());
    small_dataset(&b, tmp.path());
    let (ta, tb) = (tree_bytes(&a), tree_bytes(&b));
    assert_eq!(ta.len(), 2 * 44 + 1);
    assert_eq!(ta, tb);
}

#[test]
fn train_eval_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let runs = tmp.path().join("runs");
    small_dataset(&data, &runs);
    let d = data.to_str().unwrap();

    let rec: serde_json::Value = serde_json::from_str(&ok(&quakerank(
        &["train", "--data", d, "--loss", "mse", "--epochs", "1"],
        &runs,
    )))
    .unwrap();
    // Omitted flags are echoed with the published defaults.
    assert_eq!(rec["config"]["ranking_enabled"], false);
    assert_eq!(rec["config"]["batch_size"], 16);
    assert_eq!(rec["config"]["peak_lr"], 1e-4);
    assert_eq!(rec["config"]["margin"], 0.02);
    assert_eq!(rec["config"]["flip_prob"], 0.5);
    let ckpt = rec["checkpoint_path"].as_str().unwrap().to_string();
    assert!(Path::new(&ckpt).exists());
    assert!(Path::new(rec["epoch_log_path"].as_str().unwrap()).exists());

    let rank: serde_json::Value = serde_json::from_str(&ok(&quakerank(
        &[
            "train", "--data", d, "--loss", "mse+rank", "--margin", "0.02", "--epochs", "1",
        ],
        &runs,
    )))
    .unwrap();
    assert_eq!(rank["config"]["ranking_enabled"], true);
    assert_ne!(rank["run_id"], rec["run_id"]);

    let metrics = |split: &str| -> serde_json::Value {
        serde_json::from_str(&ok(&quakerank(
            &["eval", "--data", d, "--ckpt", &ckpt, "--split", split],
            &runs,
        )))
        .unwrap()
    };
    let (val, test) = (metrics("val"), metrics("test"));
    for key in [
        "mae",
        "rmse",
        "pairwise_accuracy",
        "kendall_tau",
        "n_samples",
    ] {
        assert!(test.get(key).is_some(), "missing {key}");
    }
    assert_eq!(val["n_samples"], 8);
    assert_eq!(test["n_samples"], 12);
    assert_eq!(test["mae"], rec["metrics"]["mae"]);

    let report = ok(&quakerank(
        &["report", "--runs", runs.to_str().unwrap()],
        &runs,
    ));
    assert!(report.contains("model,params,mflops,l_mr,seed,mae,pairwise_accuracy,kendall_tau"));
    assert_eq!(
        report
            .lines()
            .filter(|l| l.starts_with("ref-cnn,6137,"))
            .count(),
        4
    );
}

#[test]
fn corrupted_checkpoint_fails_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    small_dataset(&data, tmp.path());
    let bad = tmp.path().join("bad.qrnk");
    fs::write(&bad, b"QRNK\x01\x00\x00\x00garbage").unwrap();
    let out = quakerank(
        &[
            "eval",
            "--data",
            data.to_str().unwrap(),
            "--ckpt",
            bad.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn invalid_loss_name_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = quakerank(&["train", "--data", "x", "--loss", "rank"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_on_empty_runs_dir_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = quakerank(
        &["report", "--runs", tmp.path().to_str().unwrap()],
        tmp.path(),
    );
    assert!(!out.status.success());
}

#[test]
fn gradcheck_exit_code_reflects_result() {
    let tmp = tempfile::tempdir().unwrap();
    let pass = quakerank(&["gradcheck", "--seed", "0"], tmp.path());
    let report: serde_json::Value = serde_json::from_str(&ok(&pass)).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["params_checked"], 6137);
    let f32 = quakerank(&["gradcheck", "--precision", "float32"], tmp.path());
    assert!(!f32.status.success());
}

#[test]
fn flops_layers_sum_to_total() {
    let tmp = tempfile::tempdir().unwrap();
    let r: serde_json::Value =
        serde_json::from_str(&ok(&quakerank(&["flops", "--size", "32"], tmp.path()))).unwrap();
    let sum: u64 = r["layers"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| l["flops"].as_u64().unwrap())
        .sum();
    assert_eq!(sum, 1_786_976);
}
