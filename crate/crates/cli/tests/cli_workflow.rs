//! End-to-end exercise of every CLI subcommand on a tiny dataset.

use std::path::Path;
use std::process::Command;

fn caap(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_caap"))
        .args(args)
        .output()
        .expect("spawn caap")
}

fn ok(args: &[&str]) -> String {
    let out = caap(args);
    assert!(
        out.status.success(),
        "caap {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> String {
    path.to_str().unwrap().to_string()
}

#[test]
fn full_cli_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let ds_dir = dir.path().join("ds");
    let search_dir = dir.path().join("search");
    let run_dir = dir.path().join("run");
    let base_dir = dir.path().join("base");
    let sweep_dir = dir.path().join("sweep");
    let eval_dir = dir.path().join("eval");
    let eval_base_dir = dir.path().join("eval_base");

    // gen-data writes binary + csv + meta and prints the oracle sanity check
    let out = ok(&[
        "gen-data",
        "--seed",
        "5",
        "--out",
        &p(&ds_dir),
        "--per-class",
        "12,12,12",
    ]);
    assert!(out.contains("centroid-oracle accuracy"));
    assert!(ds_dir.join("data.bin").exists());
    assert!(ds_dir.join("data.csv").exists());
    assert!(ds_dir.join("data.meta.toml").exists());

    let data = p(&ds_dir.join("data.bin"));
    let small = [
        "--arch",
        "mini_fcn",
        "--epochs",
        "2",
        "--batch-size",
        "16",
        "--freq-sea",
        "1",
    ];

    // search
    let sp = p(&search_dir);
    let mut args = vec!["search", "--seed", "5", "--data", &data, "--out", &sp];
    args.extend_from_slice(&small);
    ok(&args);
    for f in [
        "policy.ckpt",
        "search_model.ckpt",
        "regulation.csv",
        "search_log.csv",
        "policy_passes.csv",
        "config.toml",
    ] {
        assert!(search_dir.join(f).exists(), "missing search artifact {f}");
    }

    // train (paired with NOAUG internally)
    let rp = p(&run_dir);
    let mut args = vec![
        "train", "--seed", "5", "--data", &data, "--search-dir", &sp, "--out", &rp,
    ];
    args.extend_from_slice(&small);
    ok(&args);
    for f in [
        "metrics.csv",
        "summary.txt",
        "preds_aug.csv",
        "preds_noaug.csv",
        "losses.csv",
        "policies.csv",
        "model.ckpt",
        "config.toml",
    ] {
        assert!(run_dir.join(f).exists(), "missing run artifact {f}");
    }
    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("class,recall,stp,sfp,sfn,stn,improve,bias,gain,search_recall,w_noaug"));

    // report audit passes on a fresh run dir
    let out = ok(&["report", "--run-dir", &p(&run_dir)]);
    assert!(out.contains("audit passed"));

    // baselines
    let bp = p(&base_dir);
    let mut args = vec![
        "baseline", "--seed", "5", "--data", &data, "--method", "uniform", "--out", &bp,
    ];
    args.extend_from_slice(&small);
    ok(&args);
    assert!(base_dir.join("metrics.csv").exists());

    // eval: plain then paired + saliency dump
    ok(&[
        "eval",
        "--model",
        &p(&base_dir.join("model.ckpt")),
        "--data",
        &data,
        "--out",
        &p(&eval_base_dir),
    ]);
    let out = ok(&[
        "eval",
        "--model",
        &p(&run_dir.join("model.ckpt")),
        "--data",
        &data,
        "--out",
        &p(&eval_dir),
        "--baseline-preds",
        &p(&eval_base_dir.join("preds.csv")),
        "--dump-saliency",
        "1",
    ]);
    assert!(out.contains("macro_swise_gain="));
    assert!(eval_dir.join("saliency").join("sample_0.csv").exists());

    // sweep over three points
    let swp = p(&sweep_dir);
    let mut args = vec![
        "sweep-noaug", "--seed", "5", "--data", &data, "--search-dir", &sp,
        "--percentages", "0,50,100", "--out", &swp,
    ];
    args.extend_from_slice(&["--arch", "mini_fcn", "--epochs", "1", "--batch-size", "16"]);
    ok(&args);
    assert!(sweep_dir.join("sweep.csv").exists());
    assert!(sweep_dir.join("sweep.svg").exists());
    let summary = std::fs::read_to_string(sweep_dir.join("sweep_summary.txt")).unwrap();
    assert!(summary.contains("argmax_q_accuracy="));

    // csv ingestion path: train from the csv copy of the dataset
    let csv = p(&ds_dir.join("data.csv"));
    let bcsv = p(&dir.path().join("base_csv"));
    let mut args = vec![
        "baseline", "--seed", "5", "--data", &csv, "--method", "noaug", "--out", &bcsv,
    ];
    args.extend_from_slice(&small);
    ok(&args);
}

#[test]
fn missing_seed_is_rejected() {
    let out = caap(&["search", "--data", "x.bin", "--out", "y"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--seed"), "stderr: {err}");
}

#[test]
fn tampered_report_fails_audit() {
    let dir = tempfile::tempdir().unwrap();
    let ds_dir = dir.path().join("ds");
    let base_dir = dir.path().join("base");
    ok(&[
        "gen-data", "--seed", "9", "--out", &p(&ds_dir), "--per-class", "9,9,9", "--no-csv",
    ]);
    let data = p(&ds_dir.join("data.bin"));
    ok(&[
        "baseline", "--seed", "9", "--data", &data, "--method", "noaug",
        "--out", &p(&base_dir), "--arch", "mini_fcn", "--epochs", "1", "--batch-size", "16",
    ]);
    let path = base_dir.join("preds_aug.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    // flip one prediction
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let cols: Vec<&str> = lines[1].split(',').collect();
    let flipped = format!("{},{},{}", cols[0], cols[1], (cols[2].parse::<usize>().unwrap() + 1) % 3);
    lines[1] = flipped;
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    let out = caap(&["report", "--run-dir", &p(&base_dir)]);
    assert!(!out.status.success(), "audit accepted a tampered report");
}
