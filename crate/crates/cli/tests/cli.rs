//! End-to-end tests of the `adpc` binary: file outputs, exit codes,
//! determinism, and the dense-equivalence of `--no-adaptivity` against an
//! unattainable threshold.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn adpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adpc")).args(args).output().expect("binary runs")
}

fn tmp(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn gen_sample(dir: &Path) -> (String, String, String) {
    let out = adpc(&["gen-sample", "--out", dir.to_str().unwrap(), "--seed", "0"]);
    assert!(out.status.success(), "gen-sample failed: {}", String::from_utf8_lossy(&out.stderr));
    (
        dir.join("config.json").to_str().unwrap().to_string(),
        dir.join("weights.adpc").to_str().unwrap().to_string(),
        dir.join("sample.ppm").to_str().unwrap().to_string(),
    )
}

fn report_json(dir: &Path) -> serde_json::Value {
    let body = std::fs::read_to_string(dir.join("report.json")).expect("report exists");
    serde_json::from_str(&body).expect("report parses")
}

#[test]
fn run_on_sample_reports_growing_skipped_fractions() {
    let dir = tmp("run_sample");
    let (config, weights, input) = gen_sample(&dir.join("sample"));
    let out_dir = dir.join("out");
    let out = adpc(&[
        "run", "--config", &config, "--weights", &weights, "--input", &input, "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let report = report_json(&out_dir);
    assert_eq!(report["halted_at"], "complete");
    let exits = report["exits"].as_array().unwrap();
    assert_eq!(exits.len(), 4);
    let fractions: Vec<f64> =
        exits.iter().map(|e| e["skipped_fraction"].as_f64().unwrap()).collect();
    for pair in fractions.windows(2) {
        assert!(pair[1] >= pair[0], "fractions not growing: {fractions:?}");
    }
    assert!(fractions[0] > fractions.first().copied().unwrap() - 1.0); // sanity
    assert!(fractions[2] > fractions[0], "strict growth by exit 3: {fractions:?}");

    for e in exits {
        for key in ["prediction", "mask"] {
            let path = out_dir.join(e[key].as_str().unwrap());
            assert!(path.exists(), "missing {}", path.display());
        }
    }
    assert!(out_dir.join("predictions.adpc").exists());
    assert!(!out_dir.join("report.json.tmp").exists());
}

#[test]
fn budget_exits_one_writes_one_prediction() {
    let dir = tmp("budget_one");
    let (config, weights, input) = gen_sample(&dir.join("sample"));
    let out_dir = dir.join("out");
    let out = adpc(&[
        "run", "--config", &config, "--weights", &weights, "--input", &input, "--out",
        out_dir.to_str().unwrap(), "--budget-exits", "1",
    ]);
    assert!(out.status.success());
    let report = report_json(&out_dir);
    assert_eq!(report["exits"].as_array().unwrap().len(), 1);
    assert_ne!(report["halted_at"], "complete");
    assert!(out_dir.join("exit1_prediction.pgm").exists());
    assert!(!out_dir.join("exit2_prediction.pgm").exists());
}

#[test]
fn no_adaptivity_equals_unattainable_threshold_byte_for_byte() {
    let dir = tmp("dense_equiv");
    let (config, weights, input) = gen_sample(&dir.join("sample"));

    // Same model with an unattainable probability threshold.
    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&config).unwrap()).unwrap();
    cfg["criterion"]["threshold"] = serde_json::json!(1.01);
    let unattainable = dir.join("unattainable.json");
    std::fs::write(&unattainable, cfg.to_string()).unwrap();

    let out_a = dir.join("out_no_adaptivity");
    let out_b = dir.join("out_unattainable");
    assert!(adpc(&[
        "run", "--config", &config, "--weights", &weights, "--input", &input, "--out",
        out_a.to_str().unwrap(), "--no-adaptivity",
    ])
    .status
    .success());
    assert!(adpc(&[
        "run", "--config", unattainable.to_str().unwrap(), "--weights", &weights, "--input",
        &input, "--out", out_b.to_str().unwrap(),
    ])
    .status
    .success());

    for i in 1..=4 {
        let name = format!("exit{i}_prediction.pgm");
        let a = std::fs::read(out_a.join(&name)).unwrap();
        let b = std::fs::read(out_b.join(&name)).unwrap();
        assert_eq!(a, b, "{name} differs");
    }
    let a = std::fs::read(out_a.join("predictions.adpc")).unwrap();
    let b = std::fs::read(out_b.join("predictions.adpc")).unwrap();
    assert_eq!(a, b, "raw predictions differ");
}

#[test]
fn rerunning_is_byte_identical() {
    let dir = tmp("determinism");
    let (config, weights, input) = gen_sample(&dir.join("sample"));
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        assert!(adpc(&[
            "run", "--config", &config, "--weights", &weights, "--input", &input, "--out",
            out.to_str().unwrap(),
        ])
        .status
        .success());
    }
    for entry in std::fs::read_dir(&out_a).unwrap() {
        let name = entry.unwrap().file_name();
        let a = std::fs::read(out_a.join(&name)).unwrap();
        let b = std::fs::read(out_b.join(&name)).unwrap();
        assert_eq!(a, b, "{name:?} differs between identical runs");
    }
}

#[test]
fn malformed_ppm_exits_2() {
    let dir = tmp("bad_ppm");
    let (config, weights, _) = gen_sample(&dir.join("sample"));
    let bad = dir.join("bad.ppm");
    std::fs::write(&bad, b"P6 2 2 255\n123").unwrap(); // truncated raster
    let out = adpc(&[
        "run", "--config", &config, "--weights", &weights, "--input", bad.to_str().unwrap(),
        "--out", dir.join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_or_corrupt_weights_exit_3() {
    let dir = tmp("bad_weights");
    let (config, weights, input) = gen_sample(&dir.join("sample"));
    let out = adpc(&[
        "run", "--config", &config, "--weights", dir.join("nope.adpc").to_str().unwrap(),
        "--input", &input, "--out", dir.join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));

    let mut bytes = std::fs::read(&weights).unwrap();
    bytes[0] ^= 0xFF;
    let corrupt = dir.join("corrupt.adpc");
    std::fs::write(&corrupt, bytes).unwrap();
    let out = adpc(&[
        "run", "--config", &config, "--weights", corrupt.to_str().unwrap(), "--input", &input,
        "--out", dir.join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bench_threshold_sweep_row_count_and_determinism() {
    let dir = tmp("bench");
    let (config, weights, _) = gen_sample(&dir.join("sample"));
    let csv_a = dir.join("a.csv");
    let csv_b = dir.join("b.csv");
    // CSV bytes do not depend on the worker count.
    for (csv, threads) in [(&csv_a, "1"), (&csv_b, "4")] {
        let out = Command::new(env!("CARGO_BIN_EXE_adpc"))
            .env("ADPC_THREADS", threads)
            .args([
                "bench", "--config", &config, "--weights", &weights, "--sweep",
                "threshold=0.9,0.99,0.998", "--out", csv.to_str().unwrap(), "--dataset-size", "2",
            ])
            .output()
            .expect("binary runs");
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = std::fs::read_to_string(&csv_a).unwrap();
    let b = std::fs::read_to_string(&csv_b).unwrap();
    assert_eq!(a, b);
    // Header plus 3 values x 4 exits.
    assert_eq!(a.lines().count(), 13);
    assert!(a.starts_with("param,exit,accuracy,gflops,skipped_fraction\n"));
}

#[test]
fn bench_deduplicates_with_warning_and_radius_shape() {
    let dir = tmp("bench_radius");
    let (config, weights, _) = gen_sample(&dir.join("sample"));
    let csv = dir.join("radius.csv");
    let out = adpc(&[
        "bench", "--config", &config, "--weights", &weights, "--sweep", "radius=3,5,5,7,9",
        "--out", csv.to_str().unwrap(), "--dataset-size", "1",
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("duplicate"));
    let body = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(body.lines().count(), 1 + 4 * 4);
    // Radius values print as integers.
    assert!(body.lines().nth(1).unwrap().starts_with("3,1,"));

    let out = adpc(&[
        "bench", "--config", &config, "--weights", &weights, "--sweep", "nope=1", "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_passes_across_seeds() {
    for seed in 0..10u64 {
        let out = adpc(&["verify", "--seed", &seed.to_string()]);
        assert!(
            out.status.success(),
            "verify --seed {seed}: {}",
            String::from_utf8_lossy(&out.stdout)
        );
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(adpc(&["run", "--bogus"]).status.code(), Some(2));
    assert_eq!(adpc(&["nonsense"]).status.code(), Some(2));
    let dir = tmp("usage");
    let (config, weights, input) = gen_sample(&dir.join("sample"));
    let out = adpc(&[
        "run", "--config", &config, "--weights", &weights, "--input", &input, "--out",
        dir.join("out").to_str().unwrap(), "--budget-exits", "1", "--budget-gflops", "0.5",
    ]);
    assert_eq!(out.status.code(), Some(2));
}
