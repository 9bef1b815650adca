//! End-to-end runs of the command-line binary: the pipeline round trip,
//! byte-identical reruns, override and thread-cap resolution, and the
//! exit-code contract (2 config, 3 numeric, 4 empty benchmark).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cxplain"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary should spawn")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn assert_exit(out: &Output, code: i32, stderr_needle: &str) {
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(code), "stderr: {stderr}");
    assert!(
        stderr.contains(stderr_needle),
        "stderr missing '{stderr_needle}': {stderr}"
    );
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

/// A fast configuration: closed-form target model, tiny explainer.
fn pipeline_config(out_dir: &Path) -> String {
    format!(
        r#"{{
  "dataset": {{"kind": "single_informative", "n": 60, "p": 4}},
  "label_format": "binary",
  "grouping": {{"kind": "identity"}},
  "masking": {{"kind": "zero"}},
  "loss": "mean_squared_error",
  "target_model": {{"kind": "analytic", "model": {{"kind": "select_feature", "index": 0}}}},
  "explainer": {{"hidden": [8], "learning_rate": 0.005, "epochs": 8, "batch_size": 16}},
  "master_seed": 11,
  "output_dir": {:?}
}}"#,
        out_dir.display().to_string()
    )
}

fn read_bytes(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn the_pipeline_reruns_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let config = write_config(tmp.path(), "config.json", &pipeline_config(&out_dir));
    let config = config.to_str().unwrap();

    assert_ok(&run(&["targets", "--config", config], &[]));
    assert_ok(&run(&["train", "--config", config], &[]));

    let tracked = [
        "config.json",
        "omega.csv",
        "omega_meta.json",
        "explainer.json",
        "history.csv",
    ];
    let first: Vec<Vec<u8>> = tracked.iter().map(|n| read_bytes(&out_dir, n)).collect();
    assert!(out_dir.join("run.log").exists());

    assert_ok(&run(&["targets", "--config", config], &[]));
    assert_ok(&run(&["train", "--config", config], &[]));
    for (name, before) in tracked.iter().zip(&first) {
        assert_eq!(
            &read_bytes(&out_dir, name),
            before,
            "{name} changed across a rerun"
        );
    }
}

#[test]
fn explain_attributes_rows_and_empty_input_yields_only_the_header() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let config = write_config(tmp.path(), "config.json", &pipeline_config(&out_dir));
    let config = config.to_str().unwrap();
    assert_ok(&run(&["targets", "--config", config], &[]));
    assert_ok(&run(&["train", "--config", config], &[]));
    let model = out_dir.join("explainer.json");
    let model = model.to_str().unwrap();

    let input = write_config(
        tmp.path(),
        "input.csv",
        "f0,f1,f2,f3\n0.9,0.1,0.2,0.3\n0.05,0.8,0.2,0.9\n",
    );
    let output = tmp.path().join("attr.csv");
    let args = [
        "explain",
        "--model",
        model,
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
    ];
    assert_ok(&run(&args, &[]));
    let text = std::fs::read_to_string(&output).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "attribution_0,attribution_1,attribution_2,attribution_3"
    );
    assert_eq!(lines.len(), 3);
    for line in &lines[1..] {
        let row: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(row.len(), 4);
        assert!(row.iter().all(|v| *v >= 0.0 && v.is_finite()));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9, "{line}");
    }
    let bytes = std::fs::read(&output).unwrap();
    assert_ok(&run(&args, &[]));
    assert_eq!(std::fs::read(&output).unwrap(), bytes);

    let empty = write_config(tmp.path(), "empty.csv", "f0,f1,f2,f3\n");
    let out2 = tmp.path().join("attr_empty.csv");
    assert_ok(&run(
        &[
            "explain",
            "--model",
            model,
            "--input",
            empty.to_str().unwrap(),
            "--output",
            out2.to_str().unwrap(),
        ],
        &[],
    ));
    assert_eq!(
        std::fs::read_to_string(&out2).unwrap(),
        "attribution_0,attribution_1,attribution_2,attribution_3\n"
    );

    let narrow = write_config(tmp.path(), "narrow.csv", "f0,f1,f2\n0.1,0.2,0.3\n");
    let mismatch = run(
        &[
            "explain",
            "--model",
            model,
            "--input",
            narrow.to_str().unwrap(),
            "--output",
            out2.to_str().unwrap(),
        ],
        &[],
    );
    assert_exit(&mismatch, 2, "error:");
}

#[test]
fn set_overrides_reach_the_effective_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let config = write_config(tmp.path(), "config.json", &pipeline_config(&out_dir));
    let config = config.to_str().unwrap();
    assert_ok(&run(
        &[
            "targets",
            "--config",
            config,
            "--set",
            "master_seed=99",
            "--set",
            "dataset.n=40",
        ],
        &[],
    ));
    let effective = std::fs::read_to_string(out_dir.join("config.json")).unwrap();
    assert!(effective.contains("\"master_seed\": 99"), "{effective}");
    assert!(effective.contains("\"n\": 40"), "{effective}");

    let bad = run(&["targets", "--config", config, "--set", "no_equals"], &[]);
    assert_exit(&bad, 2, "key=value");
}

#[test]
fn thread_caps_resolve_flag_then_configuration_then_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let config = write_config(tmp.path(), "config.json", &pipeline_config(&out_dir));
    let config = config.to_str().unwrap();

    let bad_env = run(
        &["targets", "--config", config],
        &[("CXPLAIN_THREADS", "abc")],
    );
    assert_exit(&bad_env, 2, "CXPLAIN_THREADS");
    let zero_env = run(
        &["targets", "--config", config],
        &[("CXPLAIN_THREADS", "0")],
    );
    assert_exit(&zero_env, 2, "CXPLAIN_THREADS");
    let zero_flag = run(&["targets", "--config", config, "--threads", "0"], &[]);
    assert_exit(&zero_flag, 2, "thread cap");

    // The flag shadows the environment, so the broken value never loads.
    assert_ok(&run(
        &["targets", "--config", config, "--threads", "1"],
        &[("CXPLAIN_THREADS", "abc")],
    ));
    assert_ok(&run(
        &["targets", "--config", config],
        &[("CXPLAIN_THREADS", "2")],
    ));
}

#[test]
fn missing_inputs_and_invalid_configurations_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let config = write_config(tmp.path(), "config.json", &pipeline_config(&out_dir));
    let config = config.to_str().unwrap();

    let absent = run(&["targets", "--config", "/nonexistent/config.json"], &[]);
    assert_exit(&absent, 2, "error:");

    let out_of_range = run(
        &["targets", "--config", config, "--set", "evaluation.q=0"],
        &[],
    );
    assert_exit(&out_of_range, 2, "evaluation.q");

    // Training without a targets file has nothing to fit.
    let no_targets = run(&["train", "--config", config], &[]);
    assert_exit(&no_targets, 2, "error:");
}

#[test]
fn diverging_training_exits_with_code_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let config = write_config(tmp.path(), "config.json", &pipeline_config(&out_dir));
    let config = config.to_str().unwrap();
    assert_ok(&run(&["targets", "--config", config], &[]));
    let diverged = run(
        &[
            "train",
            "--config",
            config,
            "--set",
            "explainer.learning_rate=1e200",
            "--set",
            "explainer.epochs=3",
        ],
        &[],
    );
    assert_exit(&diverged, 3, "non-finite loss");
}

#[test]
fn a_benchmark_where_every_image_is_skipped_exits_with_code_4() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    // A constant model moves no probability when features are masked, so
    // the positive-score filter leaves nothing on any image.
    let body = format!(
        r#"{{
  "dataset": {{"kind": "single_informative", "n": 50, "p": 4}},
  "label_format": "binary",
  "grouping": {{"kind": "identity"}},
  "masking": {{"kind": "zero"}},
  "loss": "binary_crossentropy",
  "target_model": {{"kind": "analytic", "model": {{"kind": "constant", "value": 0.6}}}},
  "explainer": {{"hidden": [4], "learning_rate": 0.005, "epochs": 3, "batch_size": 16}},
  "ensemble": {{"num_members": 2, "gamma": 0.9}},
  "evaluation": {{"q": 0.25, "top_fraction": 0.5, "num_test_images": 5, "ensemble_sizes": [2]}},
  "master_seed": 5,
  "output_dir": {:?}
}}"#,
        out_dir.display().to_string()
    );
    let config = write_config(tmp.path(), "config.json", &body);
    let skipped = run(&["benchmark", "--config", config.to_str().unwrap()], &[]);
    assert_exit(&skipped, 4, "empty benchmark");
}
