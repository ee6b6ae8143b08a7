//! Black-box tests of the `vflr` binary: every subcommand is exercised
//! through its real process interface, checking artifacts and exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use num_traits::Num;
use rand::SeedableRng;
use serde_json::Value;

use vflr_core::data::{
    self, dataset_checksum, load_shard, merge_shards, Dataset, SplitManifest, VerticalDataset,
};
use vflr_core::PartyRole;

fn vflr() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vflr"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn vflr")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes a labeled source dataset as CSV (the format `split-data` ingests).
fn write_source_csv(path: &Path, dataset: &Dataset) {
    let shard = VerticalDataset {
        role: PartyRole::A,
        features: dataset.features.clone(),
        labels: dataset.labels.clone(),
        column_names: dataset.column_names.clone(),
    };
    data::save_dense_csv(path, &shard).unwrap();
}

/// Generates blobs, splits 2/m_b, and writes both shards as CSV.
fn shard_files(dir: &Path, n: usize, m_b: usize, seed: u64) -> (PathBuf, PathBuf) {
    let source = data::gen_blobs(n, 2 + m_b, seed);
    let (a, b, _) = data::vertical_split(&source, 2, None).unwrap();
    let a_path = dir.join("a.csv");
    let b_path = dir.join("b.csv");
    data::save_dense_csv(&a_path, &a).unwrap();
    data::save_dense_csv(&b_path, &b).unwrap();
    (a_path, b_path)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

// ---------------------------------------------------------------------------
// keygen

#[test]
fn keygen_writes_a_working_mode_restricted_keypair() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(vflr()
        .args(["keygen", "--bits", "1024", "--seed", "1", "--out-dir"])
        .arg(dir.path()));
    assert_exit(&out, 0);

    let pk_json = read_json(&dir.path().join("public_key.json"));
    let sk_json = read_json(&dir.path().join("private_key.json"));
    assert_eq!(pk_json["kind"], "paillier-public");
    assert_eq!(sk_json["kind"], "paillier-private");

    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let mode = fs::metadata(dir.path().join("private_key.json"))
            .unwrap()
            .permissions()
            .mode();
        assert_eq!(mode & 0o777, 0o600);
    }

    // the files really are a usable keypair
    let n = num_bigint::BigUint::from_str_radix(pk_json["n"].as_str().unwrap(), 16).unwrap();
    let p = num_bigint::BigUint::from_str_radix(sk_json["p"].as_str().unwrap(), 16).unwrap();
    let q = num_bigint::BigUint::from_str_radix(sk_json["q"].as_str().unwrap(), 16).unwrap();
    assert_eq!(&p * &q, n);
    let sk = vflr_core::ahe::PrivateKey::from_primes(1024, p, q).unwrap();
    let pk = sk.public().clone();
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(9);
    let encoded = pk.encode(-3.75, 40).unwrap();
    let ct = pk.encrypt(&encoded, &mut rng).unwrap();
    assert_eq!(sk.decrypt(&ct).unwrap(), -3.75);

    // regeneration without a seed yields a different modulus
    let dir2 = tempfile::tempdir().unwrap();
    let out = run(vflr().args(["keygen", "--out-dir"]).arg(dir2.path()));
    assert_exit(&out, 0);
    let pk2 = read_json(&dir2.path().join("public_key.json"));
    assert_ne!(pk_json["n"], pk2["n"]);
}

#[test]
fn keygen_rejects_unsupported_bit_lengths() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(vflr()
        .args(["keygen", "--bits", "1000", "--out-dir"])
        .arg(dir.path()));
    assert_exit(&out, 1);
    assert!(stderr(&out).contains("1000"), "{}", stderr(&out));
}

// ---------------------------------------------------------------------------
// split-data

#[test]
fn split_data_roundtrips_through_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let source = data::gen_blobs(40, 6, 3);
    let input = dir.path().join("source.csv");
    write_source_csv(&input, &source);

    let out_dir = dir.path().join("split");
    let out = run(vflr()
        .arg("split-data")
        .args(["--m-a", "2", "--seed", "9"])
        .arg("--input")
        .arg(&input)
        .arg("--out-dir")
        .arg(&out_dir));
    assert_exit(&out, 0);

    let a = load_shard(out_dir.join("shard_a.csv"), PartyRole::A).unwrap();
    let b = load_shard(out_dir.join("shard_b.csv"), PartyRole::B).unwrap();
    assert_eq!((a.cols(), b.cols()), (2, 4));
    let manifest: SplitManifest =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    let merged = merge_shards(&a, &b, &manifest).unwrap();
    assert_eq!(dataset_checksum(&merged), manifest.checksum);
}

#[test]
fn split_data_rejects_degenerate_widths() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("source.csv");
    write_source_csv(&input, &data::gen_blobs(10, 6, 3));
    let out = run(vflr()
        .arg("split-data")
        .args(["--m-a", "6"])
        .arg("--input")
        .arg(&input)
        .arg("--out-dir")
        .arg(dir.path().join("split")));
    assert_exit(&out, 2);
}

// ---------------------------------------------------------------------------
// train

#[test]
fn duplex_train_writes_the_advertised_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (a_path, b_path) = shard_files(dir.path(), 60, 3, 5);
    let out_dir = dir.path().join("run");
    let out = run(vflr()
        .arg("train")
        .args([
            "--role",
            "duplex",
            "--eta",
            "0.4",
            "--max-iterations",
            "12",
            "--tolerance",
            "0",
            "--seed",
            "5",
            "--trace-auc",
        ])
        .arg("--data-a")
        .arg(&a_path)
        .arg("--data-b")
        .arg(&b_path)
        .arg("--out-dir")
        .arg(&out_dir));
    assert_exit(&out, 0);

    let trace = fs::read_to_string(out_dir.join("trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(
        lines.next().unwrap(),
        "iteration,loss,train_auc,ms_step2,ms_step3,ms_step4,ms_step5,ms_step6"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 12);
    let losses: Vec<f64> = rows
        .iter()
        .map(|r| r.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(
        losses.windows(2).all(|w| w[1] <= w[0] + 1e-9),
        "loss not monotone: {losses:?}"
    );
    // --trace-auc fills the third column
    assert!(rows[0].split(',').nth(2).unwrap().parse::<f64>().is_ok());

    for model in ["model_a.bin", "model_b.bin"] {
        assert!(out_dir.join(model).exists(), "{model} missing");
    }
    let report = read_json(&out_dir.join("leakage_report.json"));
    assert_eq!(report["n"], 60);
    assert_eq!(report["m"], 3);
    assert_eq!(report["residuals_recoverable_by_B"], false);
}

#[test]
fn train_gate_refuses_wide_b_shards_with_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let (a_path, b_path) = shard_files(dir.path(), 10, 12, 6);
    let out_dir = dir.path().join("run");
    let base = |out_dir: &Path| {
        let mut cmd = vflr();
        cmd.arg("train")
            .args(["--role", "duplex", "--max-iterations", "1", "--seed", "1"])
            .arg("--data-a")
            .arg(&a_path)
            .arg("--data-b")
            .arg(&b_path)
            .arg("--out-dir")
            .arg(out_dir);
        cmd
    };
    let out = run(&mut base(&out_dir));
    assert_exit(&out, 3);
    assert!(!out_dir.join("model_a.bin").exists(), "trained despite gate");

    let out_dir2 = dir.path().join("run-unsafe");
    let out = run(base(&out_dir2).arg("--unsafe"));
    assert_exit(&out, 0);
    assert!(out_dir2.join("model_a.bin").exists());
    let report = read_json(&out_dir2.join("leakage_report.json"));
    assert_eq!(report["residuals_recoverable_by_B"], true);
}

#[test]
fn train_role_a_requires_labels_in_its_shard() {
    let dir = tempfile::tempdir().unwrap();
    let (_, b_path) = shard_files(dir.path(), 20, 3, 7);
    let out = run(vflr()
        .arg("train")
        .args(["--role", "a", "--peer", "127.0.0.1:1", "--max-iterations", "1"])
        .arg("--data")
        .arg(&b_path)
        .arg("--out-dir")
        .arg(dir.path().join("out")));
    assert_exit(&out, 2);
    assert!(stderr(&out).to_lowercase().contains("label"), "{}", stderr(&out));
}

#[test]
fn masking_off_needs_the_unsafe_flag() {
    let dir = tempfile::tempdir().unwrap();
    let (a_path, b_path) = shard_files(dir.path(), 20, 3, 8);
    let out = run(vflr()
        .arg("train")
        .args([
            "--role",
            "duplex",
            "--masking",
            "off",
            "--max-iterations",
            "1",
        ])
        .arg("--data-a")
        .arg(&a_path)
        .arg("--data-b")
        .arg(&b_path)
        .arg("--out-dir")
        .arg(dir.path().join("out")));
    assert_exit(&out, 3);
}

fn free_port() -> u16 {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    listener.local_addr().unwrap().port()
}

#[test]
fn networked_run_matches_duplex_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let (a_path, b_path) = shard_files(dir.path(), 24, 3, 11);
    let hyper = [
        "--eta",
        "0.3",
        "--max-iterations",
        "6",
        "--tolerance",
        "0",
        "--seed",
        "13",
    ];

    let duplex_dir = dir.path().join("duplex");
    let out = run(vflr()
        .arg("train")
        .args(["--role", "duplex"])
        .args(hyper)
        .arg("--data-a")
        .arg(&a_path)
        .arg("--data-b")
        .arg(&b_path)
        .arg("--out-dir")
        .arg(&duplex_dir));
    assert_exit(&out, 0);

    let port = free_port();
    let addr = format!("127.0.0.1:{port}");
    let b_dir = dir.path().join("role-b");
    let a_dir = dir.path().join("role-a");
    let mut b_proc = vflr()
        .arg("train")
        .args(["--role", "b", "--listen", &addr])
        .args(hyper)
        .arg("--data")
        .arg(&b_path)
        .arg("--out-dir")
        .arg(&b_dir)
        .spawn()
        .unwrap();
    let out_a = run(vflr()
        .arg("train")
        .args(["--role", "a", "--peer", &addr])
        .args(hyper)
        .arg("--data")
        .arg(&a_path)
        .arg("--out-dir")
        .arg(&a_dir));
    let b_status = b_proc.wait().unwrap();
    assert_exit(&out_a, 0);
    assert_eq!(b_status.code(), Some(0));

    // same seed, same transcript: the model files must match byte for byte
    let read = |p: PathBuf| fs::read(p).unwrap();
    assert_eq!(
        read(a_dir.join("model_a.bin")),
        read(duplex_dir.join("model_a.bin"))
    );
    assert_eq!(
        read(b_dir.join("model_b.bin")),
        read(duplex_dir.join("model_b.bin"))
    );
    // and A's networked audit saw B's true width
    let report = read_json(&a_dir.join("leakage_report.json"));
    assert_eq!(report["m"], 3);
}

#[test]
fn train_reuses_keygen_output_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let keys = dir.path().join("keys");
    assert_exit(
        &run(vflr()
            .args(["keygen", "--seed", "3", "--out-dir"])
            .arg(&keys)),
        0,
    );
    let (a_path, b_path) = shard_files(dir.path(), 20, 3, 4);
    let train = |out_dir: &Path| {
        let out = run(vflr()
            .arg("train")
            .args(["--role", "duplex", "--max-iterations", "3", "--seed", "2"])
            .arg("--keys")
            .arg(&keys)
            .arg("--data-a")
            .arg(&a_path)
            .arg("--data-b")
            .arg(&b_path)
            .arg("--out-dir")
            .arg(out_dir));
        assert_exit(&out, 0);
    };
    let run1 = dir.path().join("r1");
    let run2 = dir.path().join("r2");
    train(&run1);
    train(&run2);
    assert_eq!(
        fs::read(run1.join("model_a.bin")).unwrap(),
        fs::read(run2.join("model_a.bin")).unwrap()
    );
    assert_eq!(
        fs::read(run1.join("model_b.bin")).unwrap(),
        fs::read(run2.join("model_b.bin")).unwrap()
    );
}

#[test]
fn config_file_sets_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let (a_path, b_path) = shard_files(dir.path(), 12, 2, 9);
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"max_iterations": 3, "tolerance": 0.0}"#).unwrap();
    let rows_after = |out_dir: &Path, extra: &[&str]| {
        let out = run(vflr()
            .arg("train")
            .args(["--role", "duplex", "--seed", "1"])
            .arg("--config")
            .arg(&cfg)
            .args(extra)
            .arg("--data-a")
            .arg(&a_path)
            .arg("--data-b")
            .arg(&b_path)
            .arg("--out-dir")
            .arg(out_dir));
        assert_exit(&out, 0);
        fs::read_to_string(out_dir.join("trace.csv"))
            .unwrap()
            .lines()
            .count()
            - 1
    };
    assert_eq!(rows_after(&dir.path().join("from-file"), &[]), 3);
    assert_eq!(
        rows_after(&dir.path().join("flag-wins"), &["--max-iterations", "2"]),
        2
    );
}

// ---------------------------------------------------------------------------
// evaluate

/// Writes a model file directly in the documented binary layout.
fn write_model_file(path: &Path, role: &str, weights: &[f64]) {
    let header = format!(
        r#"{{"role":"{role}","iterations":1,"learning_rate":0.1,"standardizer":null}}"#
    );
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    bytes.extend_from_slice(&(weights.len() as u32).to_le_bytes());
    for w in weights {
        bytes.extend_from_slice(&w.to_le_bytes());
    }
    fs::write(path, bytes).unwrap();
}

#[test]
fn evaluate_scores_chance_level_on_label_free_structure() {
    let dir = tempfile::tempdir().unwrap();
    // features carry no label signal: labels alternate independent of x
    let source = data::gen_blobs(600, 5, 21);
    let relabeled = Dataset {
        labels: Some((0..600).map(|i| (i % 2) as u8).collect()),
        ..source
    };
    let (a, b, _) = data::vertical_split(&relabeled, 2, None).unwrap();
    let a_path = dir.path().join("a.csv");
    let b_path = dir.path().join("b.csv");
    data::save_dense_csv(&a_path, &a).unwrap();
    data::save_dense_csv(&b_path, &b).unwrap();

    let model_a = dir.path().join("model_a.bin");
    let model_b = dir.path().join("model_b.bin");
    write_model_file(&model_a, "a", &[0.7, -0.3]);
    write_model_file(&model_b, "b", &[0.2, 0.9, -0.5]);

    let metrics_path = dir.path().join("metrics.json");
    let out = run(vflr()
        .arg("evaluate")
        .arg("--model-a")
        .arg(&model_a)
        .arg("--model-b")
        .arg(&model_b)
        .arg("--data-a")
        .arg(&a_path)
        .arg("--data-b")
        .arg(&b_path)
        .arg("--out")
        .arg(&metrics_path));
    assert_exit(&out, 0);
    assert!(stdout(&out).contains("train:"), "{}", stdout(&out));
    let metrics = read_json(&metrics_path);
    let auc = metrics["train_auc"].as_f64().unwrap();
    assert!((auc - 0.5).abs() < 0.05, "chance-level AUC expected, got {auc}");
    assert!(metrics["test_auc"].is_null());
}

#[test]
fn evaluate_rejects_dimension_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let (a_path, b_path) = shard_files(dir.path(), 30, 3, 2);
    let model_a = dir.path().join("model_a.bin");
    let model_b = dir.path().join("model_b.bin");
    write_model_file(&model_a, "a", &[0.1; 2]);
    write_model_file(&model_b, "b", &[0.1; 7]); // shard has 3 columns
    let out = run(vflr()
        .arg("evaluate")
        .arg("--model-a")
        .arg(&model_a)
        .arg("--model-b")
        .arg(&model_b)
        .arg("--data-a")
        .arg(&a_path)
        .arg("--data-b")
        .arg(&b_path)
        .arg("--out")
        .arg(dir.path().join("metrics.json")));
    assert_exit(&out, 2);
}

// ---------------------------------------------------------------------------
// analyze-security

#[test]
fn analyze_security_exit_codes_follow_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let clean = run(vflr().args([
        "analyze-security",
        "--n",
        "10000",
        "--m-a",
        "392",
        "--m-b",
        "200",
        "--rounds",
        "100",
    ]));
    assert_exit(&clean, 0);
    let report: Value = serde_json::from_str(&stdout(&clean)).unwrap();
    assert_eq!(report["residuals_recoverable_by_B"], false);
    assert_eq!(report["rounds_for_A_to_solve_scores"], 205);

    let out_path = dir.path().join("report.json");
    let gated = run(vflr()
        .args([
            "analyze-security",
            "--n",
            "50",
            "--m-b",
            "100",
            "--rounds",
            "1",
            "--out",
        ])
        .arg(&out_path));
    assert_exit(&gated, 3);
    assert!(stderr(&gated).contains("leakage warning"), "{}", stderr(&gated));
    assert_eq!(read_json(&out_path)["residuals_recoverable_by_B"], true);

    let unmasked = run(vflr().args([
        "analyze-security",
        "--n",
        "100",
        "--m-b",
        "10",
        "--rounds",
        "5",
        "--masking",
        "off",
    ]));
    assert_exit(&unmasked, 3);
}

// ---------------------------------------------------------------------------
// attack-demo

#[test]
fn attack_demo_recovers_labels_when_b_is_wide() {
    let out = run(vflr().args(["attack-demo", "--kind", "residuals"]));
    assert_exit(&out, 0);
    let text = stdout(&out);
    assert!(text.contains("labels recovered: 5/5"), "{text}");
}

#[test]
fn attack_demo_unmasked_exposes_features_and_masking_defeats_it() {
    let out = run(vflr().args(["attack-demo", "--kind", "unmasked"]));
    assert_exit(&out, 0);
    assert!(stdout(&out).contains("fully exposed"), "{}", stdout(&out));

    let masked = run(vflr().args(["attack-demo", "--kind", "unmasked", "--masking", "on"]));
    assert_exit(&masked, 0);
    assert!(stdout(&masked).contains("defeated"), "{}", stdout(&masked));
}

// ---------------------------------------------------------------------------
// usage errors

#[test]
fn unknown_flags_exit_with_usage_code_1() {
    let out = run(vflr().args(["train", "--role", "duplex", "--no-such-flag"]));
    assert_exit(&out, 1);
    let help = run(vflr().arg("--help"));
    assert_exit(&help, 0);
    assert!(stdout(&help).contains("analyze-security"));
}
