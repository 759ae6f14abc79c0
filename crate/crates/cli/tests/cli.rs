//! End-to-end CLI behavior: exit codes, artifact determinism, and the
//! published flops arithmetic.

use std::path::Path;
use std::process::{Command, Output};

fn pfd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pfd"))
        .args(args)
        .output()
        .expect("spawn pfd")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn gen_small(dir: &Path, seed: u64) -> std::path::PathBuf {
    let out = dir.join(format!("data-{seed}"));
    let st = pfd(&[
        "gen-data",
        "--out",
        out.to_str().unwrap(),
        "--seed",
        &seed.to_string(),
        "--records",
        "900",
        "--split",
        "750",
        "--users",
        "60",
        "--items",
        "40",
    ]);
    assert!(st.status.success(), "gen-data failed: {}", String::from_utf8_lossy(&st.stderr));
    out.join("dataset.jsonl")
}

#[test]
fn flops_prints_exact_published_numbers() {
    let out = pfd(&["flops", "--dims", "1024,512,256,128"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("mapping_flops = 688128"), "got: {text}");
    assert!(text.contains("inner_product_flops = 128"));
    assert!(text.contains("ratio = 5376"));
}

#[test]
fn flops_json_report_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("flops.json");
    let out = pfd(&["flops", "--dims", "64,32,16", "--json", json.to_str().unwrap()]);
    assert!(out.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["mapping_flops"], 64 * 32 + 32 * 16);
    assert_eq!(report["inner_product_flops"], 16);
    assert_eq!(report["ratio"], 160.0);
}

#[test]
fn missing_required_out_is_usage_error_exit_2() {
    let out = pfd(&["gen-data", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_method_is_runtime_error_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path(), 3);
    let out = pfd(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
        "--method",
        "nonsense",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown method"));
}

#[test]
fn gen_data_is_deterministic_and_counts_match() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_small(dir.path(), 7);
    let b_dir = dir.path().join("again");
    let out = pfd(&[
        "gen-data",
        "--out",
        b_dir.to_str().unwrap(),
        "--seed",
        "7",
        "--records",
        "900",
        "--split",
        "750",
        "--users",
        "60",
        "--items",
        "40",
    ]);
    assert!(out.status.success());
    let b = b_dir.join("dataset.jsonl");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let header: serde_json::Value = serde_json::from_str(
        std::fs::read_to_string(&a).unwrap().lines().next().unwrap(),
    )
    .unwrap();
    assert_eq!(header["num_records"], 900);
    let line_count = std::fs::read_to_string(&a).unwrap().lines().count();
    assert_eq!(line_count, 901, "header plus one line per record");
}

#[test]
fn train_baseline_has_no_teacher_and_reruns_hash_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path(), 11);
    let run = |tag: &str| -> (String, String) {
        let out_dir = dir.path().join(tag);
        let out = pfd(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--method",
            "baseline",
            "--task",
            "cvr",
            "--batch-size",
            "64",
            "--epochs",
            "1",
            "--seed",
            "5",
            "--warmup-steps",
            "4",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let text = stdout(&out);
        let hash = text
            .lines()
            .find_map(|l| l.strip_prefix("checkpoint_hash = "))
            .unwrap()
            .to_string();
        (hash, text)
    };
    let (h1, text) = run("run1");
    let (h2, _) = run("run2");
    assert_eq!(h1, h2, "identical flags and seed must give identical checkpoints");
    assert!(text.contains("student_auc = "));
    assert!(!text.contains("teacher_auc"), "baseline must not have a teacher");
    assert_eq!(
        std::fs::read(dir.path().join("run1/checkpoint.bin")).unwrap(),
        std::fs::read(dir.path().join("run2/checkpoint.bin")).unwrap()
    );
    assert_eq!(
        std::fs::read(dir.path().join("run1/train_log.csv")).unwrap(),
        std::fs::read(dir.path().join("run2/train_log.csv")).unwrap()
    );
}

#[test]
fn train_pfd_populates_ld_column_only_after_swap() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path(), 13);
    let out_dir = dir.path().join("pfd");
    let out = pfd(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--method",
        "pfd",
        "--task",
        "cvr",
        "--lambda",
        "0.5",
        "--swap-step",
        "5",
        "--batch-size",
        "50",
        "--epochs",
        "1",
        "--seed",
        "5",
        "--warmup-steps",
        "4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(out_dir.join("train_log.csv")).unwrap();
    for (i, line) in log.lines().skip(1).enumerate() {
        let ld = line.split(',').nth(3).unwrap();
        if i < 5 {
            assert!(ld.is_empty(), "row {i}: {line}");
        } else {
            assert!(!ld.is_empty(), "row {i}: {line}");
        }
    }
    assert!(stdout(&out).contains("teacher_auc = "));
}

#[test]
fn evaluate_checkpoint_and_reject_mismatched_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path(), 17);
    let out_dir = dir.path().join("run");
    let out = pfd(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--method",
        "baseline",
        "--batch-size",
        "64",
        "--seed",
        "2",
        "--warmup-steps",
        "4",
    ]);
    assert!(out.status.success());
    let ckpt = out_dir.join("checkpoint.bin");

    let ev = pfd(&[
        "evaluate",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(ev.status.success());
    assert!(stdout(&ev).contains("student_auc = "));

    // different generator => different schema boundaries => refusal
    let other = gen_small(dir.path(), 18);
    let bad = pfd(&[
        "evaluate",
        "--data",
        other.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("schema hash mismatch"));
}

#[test]
fn compare_grid_emits_parseable_csv_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path(), 19);
    let out_dir = dir.path().join("cmp");
    let out = pfd(&[
        "compare",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--methods",
        "baseline,lupi,md,pfd,pfd_md",
        "--task",
        "cvr",
        "--seeds",
        "1",
        "--lambda-grid",
        "0.5",
        "--batch-size",
        "64",
        "--epochs",
        "1",
        "--warmup-steps",
        "4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = pfd_core::eval::read_metrics_csv(&out_dir.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 5, "five methods, one seed, one lambda");
    assert!(rows.iter().any(|r| r.teacher_auc.is_none()));
    assert!(rows.iter().filter(|r| r.teacher_auc.is_some()).count() == 4);
    let table = std::fs::read_to_string(out_dir.join("table.txt")).unwrap();
    assert!(table.contains("pfd_md"));
    assert!(std::fs::read_to_string(out_dir.join("config.txt"))
        .unwrap()
        .contains("methods = baseline,lupi,md,pfd,pfd_md"));
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("gen.conf");
    std::fs::write(&cfg_path, "records = 900\nsplit = 750\nusers = 60\nitems = 40\nseed = 99\n")
        .unwrap();
    let out_dir = dir.path().join("from-file");
    let out = pfd(&[
        "gen-data",
        "--out",
        out_dir.to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
        "--seed",
        "7",
    ]);
    assert!(out.status.success());
    let echoed = std::fs::read_to_string(out_dir.join("config.txt")).unwrap();
    assert!(echoed.contains("seed = 7"), "flag must beat the file value");
    assert!(echoed.contains("records = 900"), "file value fills the gap");

    // flag-seed 7 output equals a pure-flag run with the same parameters
    let direct = gen_small(dir.path(), 7);
    assert_eq!(
        std::fs::read(out_dir.join("dataset.jsonl")).unwrap(),
        std::fs::read(&direct).unwrap()
    );
}

#[test]
fn serve_bench_reports_mapping_slower_than_inner_product() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("bench.json");
    let out = pfd(&[
        "serve-bench",
        "--items",
        "200",
        "--repeats",
        "1",
        "--dims",
        "256,128,64",
        "--json",
        json.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let ratio = report["ratio"].as_f64().unwrap();
    assert!(ratio > 1.0, "tower mapping must be slower than an inner product, got {ratio}");
}
