//! End-to-end tests of the `delta-lfm` binary: every subcommand runs
//! against a miniature configuration, artifacts land where documented,
//! reruns are byte-identical, and failures exit with the right codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use delta_lfm::cli::commands::load_data_dir;

const BIN: &str = env!("CARGO_BIN_EXE_delta-lfm");

/// A configuration small enough that training finishes in seconds.
const TINY_CONFIG: &str = r#"{
  "cohort": {"n_patients": 6, "visit_range": [3, 4], "width": 16, "height": 16, "seed": 11},
  "split": {"train": 0.5, "val": 0.0, "test": 0.5, "seed": 2},
  "autoencoder": {"width": 16, "height": 16, "hidden": 10, "latent_rows": 4, "latent_cols": 4},
  "ae_train": {"epochs": 2},
  "flow": {"latent_rows": 4, "latent_cols": 4, "hidden": 8, "cond_hidden": 6, "embed_dim": 4, "dt": 0.5},
  "flow_train": {"epochs": 2}
}"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary should launch")
}

fn run_ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

#[test]
fn pipeline_subcommands_chain_and_rerun_identically() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(&config, TINY_CONFIG).unwrap();
    let config = path_str(&config);
    let data = dir.path().join("data");
    let data_s = path_str(&data).to_owned();

    run_ok(&["gen-data", "--config", config, "--out", &data_s]);
    let split_bytes = fs::read(data.join("split.json")).unwrap();

    let ae_dir = dir.path().join("ae");
    let ae_ckpt = ae_dir.join("ae.ckpt");
    run_ok(&["train-ae", "--config", config, "--data", &data_s, "--out", path_str(&ae_dir)]);
    let ae_bytes = fs::read(&ae_ckpt).unwrap();

    // Rerunning the generator and the trainer must reproduce their
    // artifacts byte for byte.
    run_ok(&["gen-data", "--config", config, "--out", &data_s]);
    assert_eq!(fs::read(data.join("split.json")).unwrap(), split_bytes);
    run_ok(&["train-ae", "--config", config, "--data", &data_s, "--out", path_str(&ae_dir)]);
    assert_eq!(fs::read(&ae_ckpt).unwrap(), ae_bytes);

    let flow_dir = dir.path().join("flow");
    let model = flow_dir.join("model.ckpt");
    run_ok(&[
        "train-flow",
        "--config",
        config,
        "--data",
        &data_s,
        "--ae",
        path_str(&ae_ckpt),
        "--out",
        path_str(&flow_dir),
    ]);
    assert!(model.exists());
    assert!(fs::read_to_string(flow_dir.join("history.csv")).unwrap().starts_with("epoch,fm\n"));

    let (cohort, split) = load_data_dir(&data).unwrap();
    let patient = split.test[0];
    let source_age = cohort.patient(patient).unwrap().visits[0].age;

    let pred_dir = dir.path().join("pred");
    run_ok(&[
        "predict",
        "--model",
        path_str(&model),
        "--data",
        &data_s,
        "--out",
        path_str(&pred_dir),
        "--patient",
        &patient.to_string(),
        "--horizon",
        "2.0",
        "--interval",
        "1.0",
    ]);
    assert!(pred_dir.join("prediction.json").exists());
    assert!(pred_dir.join(format!("source_age_{source_age:.2}.pgm")).exists());
    assert!(pred_dir.join(format!("pred_age_{:.2}.pgm", source_age + 1.0)).exists());
    assert!(pred_dir.join(format!("pred_age_{:.2}.pgm", source_age + 2.0)).exists());
    let first_pred = fs::read(pred_dir.join(format!("pred_age_{:.2}.pgm", source_age + 1.0))).unwrap();
    assert!(first_pred.starts_with(b"P5\n# config_hash "));

    let eval_dir = dir.path().join("eval");
    run_ok(&[
        "evaluate",
        "--model",
        path_str(&model),
        "--data",
        &data_s,
        "--out",
        path_str(&eval_dir),
        "--split",
        "test",
    ]);
    let metrics = fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("patient_id,source_age,target_age,horizon_years,psnr_db,"));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["predictor"], "model");
    assert!(summary["n_pairs"].as_u64().unwrap() > 0);

    let base_dir = dir.path().join("eval_copy");
    run_ok(&[
        "evaluate",
        "--model",
        path_str(&model),
        "--data",
        &data_s,
        "--out",
        path_str(&base_dir),
        "--split",
        "test",
        "--baseline",
        "copy",
    ]);
    let base: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(base_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(base["predictor"], "copy");
    let copy_score = base["delta_rmae"]["mean"].as_f64().unwrap();
    assert!((copy_score - 2.0).abs() < 1e-9, "copy-forward scores exactly 2, got {copy_score}");

    let lat_dir = dir.path().join("latents");
    run_ok(&[
        "export-latents",
        "--model",
        path_str(&model),
        "--data",
        &data_s,
        "--out",
        path_str(&lat_dir),
    ]);
    let latents = fs::read_to_string(lat_dir.join("latents.csv")).unwrap();
    assert!(latents.lines().next().unwrap().starts_with("patient_id,age,status,nuclear_norm,u0,"));

    let sens_dir = dir.path().join("sens");
    run_ok(&[
        "sensitivity",
        "--out",
        path_str(&sens_dir),
        "--trials",
        "8",
        "--pixels",
        "64",
    ]);
    let sens = fs::read_to_string(sens_dir.join("sensitivity.csv")).unwrap();
    assert_eq!(sens.lines().next(), Some("sigma,mean,std,bias"));
}

#[test]
fn ablate_runs_a_variant_and_tabulates_it() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(&config, TINY_CONFIG).unwrap();
    let out = dir.path().join("ablations");

    run_ok(&[
        "ablate",
        "--config",
        path_str(&config),
        "--out",
        path_str(&out),
        "--variant",
        "no-arc",
    ]);
    let table = fs::read_to_string(out.join("ablations.csv")).unwrap();
    assert!(table.starts_with("variant,config_hash,"));
    assert!(table.lines().any(|l| l.starts_with("no-arc,")));
    assert!(out.join("no-arc").join("flow").join("model.ckpt").exists());

    // The variant drops the orientation term, so the training history
    // leaves those cells empty.
    let history = fs::read_to_string(out.join("no-arc").join("ae").join("history.csv")).unwrap();
    let first_row: Vec<&str> = history.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(first_row[3], "", "arc column is empty when the term is off");
    assert_ne!(first_row[4], "", "rank column is still populated");

    // Rerunning the same variant replaces its row instead of stacking
    // duplicates.
    run_ok(&[
        "ablate",
        "--config",
        path_str(&config),
        "--out",
        path_str(&out),
        "--variant",
        "no-arc",
    ]);
    let again = fs::read_to_string(out.join("ablations.csv")).unwrap();
    assert_eq!(again, table);
}

#[test]
fn failures_use_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    // Usage errors (unknown flags, missing arguments) exit 1.
    let usage = run(&["gen-data"]);
    assert_eq!(usage.status.code(), Some(1));
    let unknown = run(&["no-such-command"]);
    assert_eq!(unknown.status.code(), Some(1));
    let help = run(&["--help"]);
    assert_eq!(help.status.code(), Some(0), "--help is not an error");

    // Validation errors exit 1.
    let bad_config = dir.path().join("bad.json");
    fs::write(&bad_config, r#"{"split": {"train": 0.9, "val": 0.9, "test": 0.9}}"#).unwrap();
    let out_dir = dir.path().join("never");
    let bad = run(&[
        "gen-data",
        "--config",
        path_str(&bad_config),
        "--out",
        path_str(&out_dir),
    ]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(!out_dir.exists(), "nothing is written on a validation failure");

    // Missing inputs exit 2.
    let missing = run(&[
        "train-ae",
        "--data",
        path_str(&dir.path().join("no_data")),
        "--out",
        path_str(&dir.path().join("out")),
    ]);
    assert_eq!(missing.status.code(), Some(2));

    // Corrupt checkpoints exit 2.
    let fake = dir.path().join("fake.ckpt");
    fs::write(&fake, b"not a checkpoint").unwrap();
    let corrupt = run(&[
        "evaluate",
        "--model",
        path_str(&fake),
        "--data",
        path_str(&dir.path().join("no_data")),
        "--out",
        path_str(&dir.path().join("out2")),
    ]);
    assert_eq!(corrupt.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&corrupt.stderr);
    assert!(msg.contains("bad magic"), "stderr explains the failure: {msg}");
}
