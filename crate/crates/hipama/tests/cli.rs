//! End-to-end checks of the command-line surface: flags, exit codes, and
//! artifact reproducibility.

use std::path::Path;
use std::process::{Command, Output};

fn hipama(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hipama"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn gen(dir: &Path, name: &str, n: usize, seed: u64, noise: f64) -> std::path::PathBuf {
    let path = dir.join(name);
    let out = hipama(&[
        "gen-synthetic",
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--noise",
        &noise.to_string(),
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    path
}

#[test]
fn gen_synthetic_is_reproducible_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.txt", 30, 7, 0.2);
    let b = gen(dir.path(), "b.txt", 30, 7, 0.2);
    let bytes_a = std::fs::read(&a).unwrap();
    assert_eq!(bytes_a, std::fs::read(&b).unwrap(), "same flags must give identical bytes");
    assert_eq!(bytes_a.iter().filter(|&&c| c == b'\n').count(), 30);
}

#[test]
fn gen_synthetic_rejects_zero_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = hipama(&[
        "gen-synthetic",
        "--n",
        "0",
        "--out",
        dir.path().join("x.txt").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
}

#[test]
fn unknown_flags_exit_with_usage_error() {
    let out = hipama(&["train", "--bogus-flag"]);
    assert_code(&out, 2);
}

#[test]
fn runtime_failures_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let train = gen(dir.path(), "train.txt", 6, 11, 0.0);
    let out = hipama(&[
        "train",
        "--train",
        train.to_str().unwrap(),
        "--seed",
        "0",
        "--epochs",
        "50",
        "--batch-size",
        "2",
        "--lr",
        "1e120",
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_code(&out, 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("non-finite loss"), "{err}");
}

#[test]
fn train_writes_checkpoints_log_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let train = gen(dir.path(), "train.txt", 10, 1, 0.1);
    let test = gen(dir.path(), "test.txt", 6, 2, 0.1);
    let out_dir = dir.path().join("run");
    let out = hipama(&[
        "train",
        "--train",
        train.to_str().unwrap(),
        "--test",
        test.to_str().unwrap(),
        "--seed",
        "0",
        "--epochs",
        "2",
        "--batch-size",
        "5",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    for artifact in ["seed0-final.ckpt", "seed0-best.ckpt", "run.log", "seed0-report.txt"] {
        assert!(out_dir.join(artifact).exists(), "missing {artifact}");
    }
    let log = std::fs::read_to_string(out_dir.join("run.log")).unwrap();
    assert!(log.contains("parameters: "));
    assert!(log.contains("run config: "));
    assert!(log.contains("epoch 2/2"));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("epoch 1/2"), "training progress must reach stdout");
}

#[test]
fn train_artifacts_are_reproducible_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let train = gen(dir.path(), "train.txt", 8, 12, 0.1);
    // Identical flags twice into the same output directory; every artifact
    // must come out byte-identical.
    let out_dir = dir.path().join("run");
    let artifacts = ["seed1-final.ckpt", "seed1-best.ckpt", "run.log"];
    let run_once = || -> Vec<Vec<u8>> {
        let out = hipama(&[
            "train",
            "--train",
            train.to_str().unwrap(),
            "--seed",
            "1",
            "--epochs",
            "2",
            "--batch-size",
            "4",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_code(&out, 0);
        artifacts
            .iter()
            .map(|a| std::fs::read(out_dir.join(a)).unwrap())
            .collect()
    };
    let first = run_once();
    let second = run_once();
    for (name, (a, b)) in artifacts.iter().zip(first.iter().zip(&second)) {
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn multi_seed_training_aggregates_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let train = gen(dir.path(), "train.txt", 8, 3, 0.0);
    let test = gen(dir.path(), "test.txt", 6, 4, 0.0);
    let out_dir = dir.path().join("run");
    let out = hipama(&[
        "train",
        "--train",
        train.to_str().unwrap(),
        "--test",
        test.to_str().unwrap(),
        "--seeds",
        "0,1",
        "--epochs",
        "1",
        "--batch-size",
        "4",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    assert!(out_dir.join("seed0-final.ckpt").exists());
    assert!(out_dir.join("seed1-final.ckpt").exists());
    let summary = std::fs::read_to_string(out_dir.join("summary.txt")).unwrap();
    assert!(summary.contains("seeds: 0,1"));
    assert!(summary.contains("+/-"));
    assert!(summary.contains("completeness"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let train = gen(dir.path(), "train.txt", 6, 5, 0.0);
    let config_path = dir.path().join("run.json");
    std::fs::write(
        &config_path,
        r#"{"epochs": 7, "batch_size": 3, "seeds": [9], "model": {"dropout_utt": 0.0}}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("run");
    let out = hipama(&[
        "train",
        "--train",
        train.to_str().unwrap(),
        "--config",
        config_path.to_str().unwrap(),
        "--epochs",
        "2",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let log = std::fs::read_to_string(out_dir.join("run.log")).unwrap();
    assert!(log.contains("epoch 2/2"), "flag must override the file's epochs");
    assert!(log.contains("\"dropout_utt\":0.0"), "file value must survive");
    assert!(out_dir.join("seed9-final.ckpt").exists(), "seed comes from the file");
}

#[test]
fn eval_is_reproducible_and_validates_compatibility() {
    let dir = tempfile::tempdir().unwrap();
    let train = gen(dir.path(), "train.txt", 8, 6, 0.1);
    let out_dir = dir.path().join("run");
    assert_code(
        &hipama(&[
            "train",
            "--train",
            train.to_str().unwrap(),
            "--seed",
            "0",
            "--epochs",
            "1",
            "--batch-size",
            "4",
            "--out",
            out_dir.to_str().unwrap(),
        ]),
        0,
    );
    let ckpt = out_dir.join("seed0-final.ckpt");
    let (r1, r2) = (dir.path().join("r1.txt"), dir.path().join("r2.txt"));
    for r in [&r1, &r2] {
        assert_code(
            &hipama(&[
                "eval",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--data",
                train.to_str().unwrap(),
                "--out",
                r.to_str().unwrap(),
            ]),
            0,
        );
    }
    let report = std::fs::read(&r1).unwrap();
    assert_eq!(report, std::fs::read(&r2).unwrap(), "eval must be deterministic");
    let text = String::from_utf8(report).unwrap();
    assert!(text.contains("phoneme") && text.contains("pcc"));

    // A dataset whose GOP width implies a different phone inventory must be
    // rejected against this checkpoint.
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "u1|0,1|0,1|0.5,0.5;0.25,0.25|1.0,1.0|5.0,5.0|5.0,5.0|5.0,5.0|5.0,5.0,5.0,5.0,5.0\n").unwrap();
    let out = hipama(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        bad.to_str().unwrap(),
    ]);
    assert_code(&out, 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("n_phones"), "error should name the mismatch: {err}");
}

#[test]
fn inspect_attention_emits_normalized_tables() {
    let dir = tempfile::tempdir().unwrap();
    let train = gen(dir.path(), "train.txt", 8, 8, 0.1);
    let out_dir = dir.path().join("run");
    assert_code(
        &hipama(&[
            "train",
            "--train",
            train.to_str().unwrap(),
            "--seed",
            "0",
            "--epochs",
            "1",
            "--batch-size",
            "4",
            "--out",
            out_dir.to_str().unwrap(),
        ]),
        0,
    );
    let table_path = dir.path().join("weights.tsv");
    let out = hipama(&[
        "inspect-attention",
        "--checkpoint",
        out_dir.join("seed0-final.ckpt").to_str().unwrap(),
        "--data",
        train.to_str().unwrap(),
        "--out",
        table_path.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let text = std::fs::read_to_string(&table_path).unwrap();
    let mut word_rows = 0;
    let mut utt_rows = 0;
    let mut in_word = false;
    for line in text.lines() {
        if line.starts_with("# level=word") {
            in_word = true;
            continue;
        }
        if line.starts_with("# level=utterance") {
            in_word = false;
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        let values: Vec<f64> = cells[1..].iter().map(|v| v.parse().unwrap()).collect();
        if in_word {
            word_rows += 1;
            assert_eq!(values.len(), 2, "word rows carry 2 weights: {line}");
        } else {
            utt_rows += 1;
            assert_eq!(values.len(), 4, "utterance rows carry 4 weights: {line}");
        }
        let sum: f64 = values.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9, "row does not sum to 1: {line}");
    }
    assert_eq!(word_rows, 3);
    assert_eq!(utt_rows, 5);
}

#[test]
fn inspect_attention_rejects_ablated_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let train = gen(dir.path(), "train.txt", 6, 9, 0.0);
    let out_dir = dir.path().join("run");
    assert_code(
        &hipama(&[
            "train",
            "--train",
            train.to_str().unwrap(),
            "--seed",
            "0",
            "--epochs",
            "1",
            "--batch-size",
            "3",
            "--no-multi-aspect",
            "--out",
            out_dir.to_str().unwrap(),
        ]),
        0,
    );
    let out = hipama(&[
        "inspect-attention",
        "--checkpoint",
        out_dir.join("seed0-final.ckpt").to_str().unwrap(),
        "--data",
        train.to_str().unwrap(),
    ]);
    assert_code(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("multi-aspect"));
}

#[test]
fn ablation_flags_change_logged_parameter_counts() {
    let dir = tempfile::tempdir().unwrap();
    let train = gen(dir.path(), "train.txt", 6, 10, 0.0);
    let count_for = |extra: &[&str]| -> String {
        let out_dir = tempfile::tempdir().unwrap();
        let mut args = vec![
            "train",
            "--train",
            train.to_str().unwrap(),
            "--seed",
            "0",
            "--epochs",
            "1",
            "--batch-size",
            "3",
        ];
        args.extend_from_slice(extra);
        let out_path = out_dir.path().join("r");
        args.extend_from_slice(&["--out", out_path.to_str().unwrap()]);
        let out = hipama(&args);
        assert_code(&out, 0);
        let log = std::fs::read_to_string(out_path.join("run.log")).unwrap();
        log.lines()
            .find(|l| l.contains("parameters: "))
            .unwrap()
            .split("parameters: ")
            .nth(1)
            .unwrap()
            .to_string()
    };
    let full = count_for(&[]);
    let no_hier = count_for(&["--no-hierarchy"]);
    let no_ma = count_for(&["--no-multi-aspect"]);
    let both = count_for(&["--no-hierarchy", "--no-multi-aspect"]);
    assert_ne!(full, no_hier);
    assert_ne!(full, no_ma);
    assert_ne!(no_hier, no_ma);
    assert_ne!(no_hier, both);
}
