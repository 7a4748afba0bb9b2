//! End-to-end tests of the command-line binary: outputs, determinism, and
//! exit codes.

use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_labelnoise"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_of(output: &Output) -> String {
    assert!(
        output.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8(output.stdout.clone()).unwrap()
}

#[test]
fn theory_curve_reproduces_reference_parameters() {
    let out = run(&[
        "theory-curve",
        "--c",
        "10",
        "--m-bar",
        "0.9",
        "--lambda",
        "50",
        "--eps-grid",
        "0:1:0.1",
    ]);
    let text = stdout_of(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epsilon,noisy_acc,clean_acc,c,s,m_bar,lambda");
    assert_eq!(lines.len(), 12); // header + 11 grid rows

    let tipping: Vec<&str> = lines
        .iter()
        .find(|l| l.starts_with("0.9,"))
        .expect("row at eps = 0.9")
        .split(',')
        .collect();
    let noisy: f64 = tipping[1].parse().unwrap();
    let clean: f64 = tipping[2].parse().unwrap();
    assert!((noisy - 0.1).abs() <= 1e-9);
    assert!((clean - 0.45).abs() <= 1e-12);
}

#[test]
fn theory_curve_json_format() {
    let out = run(&[
        "theory-curve",
        "--c",
        "4",
        "--s",
        "1",
        "--m-bar",
        "0.8",
        "--lambda",
        "50",
        "--eps-grid",
        "0:1:0.5",
        "--format",
        "json",
    ]);
    let text = stdout_of(&out);
    let rows: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 3);
    assert_eq!(rows[0]["s"], 1);
}

#[test]
fn mixture_gen_and_noise_apply_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mix_path = dir.path().join("mix.json");
    let data_path = dir.path().join("data.csv");
    let noisy_path = dir.path().join("noisy.csv");

    let out = run(&[
        "mixture-gen",
        "--c",
        "4",
        "--d",
        "2",
        "--seed",
        "7",
        "--sample-per-class",
        "25",
        "--out",
        data_path.to_str().unwrap(),
        "--mixture-out",
        mix_path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let mixture: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&mix_path).unwrap()).unwrap();
    assert_eq!(mixture["priors"].as_array().unwrap().len(), 4);
    let data = std::fs::read_to_string(&data_path).unwrap();
    assert_eq!(data.lines().count(), 101); // header + 4 * 25

    // Zero noise leaves labels untouched.
    let out = run(&[
        "noise-apply",
        "--kind",
        "uniform",
        "--epsilon",
        "0",
        "--data",
        data_path.to_str().unwrap(),
        "--out",
        noisy_path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    for line in std::fs::read_to_string(&noisy_path)
        .unwrap()
        .lines()
        .skip(1)
    {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[1], cells[2], "label flipped at eps = 0: {line}");
    }

    // A feature-dependent kind calibrates against the mixture and records
    // alpha in the spec.
    let spec_path = dir.path().join("spec.json");
    let out = run(&[
        "noise-apply",
        "--kind",
        "gap-max",
        "--epsilon",
        "0.2",
        "--data",
        data_path.to_str().unwrap(),
        "--mixture",
        mix_path.to_str().unwrap(),
        "--spec-out",
        spec_path.to_str().unwrap(),
        "--out",
        noisy_path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let spec: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&spec_path).unwrap()).unwrap();
    assert_eq!(spec["kind"], "gap_max");
    assert!(spec["alpha"].as_f64().unwrap() > 0.0);

    // Transition matrix emission for the x-independent kinds.
    let matrix_path = dir.path().join("matrix.csv");
    let out = run(&[
        "noise-apply",
        "--kind",
        "class-dependent",
        "--epsilon",
        "0.4",
        "--spread",
        "2",
        "--data",
        data_path.to_str().unwrap(),
        "--matrix-out",
        matrix_path.to_str().unwrap(),
        "--out",
        noisy_path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let matrix = std::fs::read_to_string(&matrix_path).unwrap();
    let first: Vec<f64> = matrix
        .lines()
        .next()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(first.len(), 4);
    assert!((first[0] - 0.6).abs() <= 1e-12);
    assert!((first.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
}

#[test]
fn bayes_eval_clean_plugin_on_separated_mixture() {
    let dir = tempfile::tempdir().unwrap();
    let mix_path = dir.path().join("mix.json");
    run(&[
        "mixture-gen",
        "--c",
        "4",
        "--d",
        "2",
        "--separated",
        "--out",
        mix_path.to_str().unwrap(),
    ]);
    let out = run(&[
        "bayes-eval",
        "--mixture",
        mix_path.to_str().unwrap(),
        "--n",
        "5000",
        "--seed",
        "3",
    ]);
    let est: serde_json::Value = serde_json::from_str(&stdout_of(&out)).unwrap();
    assert!(est["mean"].as_f64().unwrap() >= 0.99);
    assert_eq!(est["n"], 5000);
}

#[test]
fn sweep_run_is_deterministic_across_invocations_and_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("sweep.json");
    std::fs::write(
        &config_path,
        serde_json::json!({
            "classes": [4],
            "dim": 2,
            "n_per_class_train": 30,
            "n_per_class_test": 30,
            "epsilon_grid": [0.0, 0.5, 1.0],
            "noise_kinds": [
                {"kind": "uniform"},
                {"kind": "class_dependent", "spread": 1}
            ],
            "classifiers": ["bayes_plugin"],
            "replicates": 2,
            "master_seed": 5
        })
        .to_string(),
    )
    .unwrap();

    let a_path = dir.path().join("a.csv");
    let b_path = dir.path().join("b.csv");
    run(&[
        "sweep-run",
        "--config",
        config_path.to_str().unwrap(),
        "--jobs",
        "1",
        "--out",
        a_path.to_str().unwrap(),
    ]);
    run(&[
        "sweep-run",
        "--config",
        config_path.to_str().unwrap(),
        "--jobs",
        "8",
        "--out",
        b_path.to_str().unwrap(),
    ]);
    let a = std::fs::read(&a_path).unwrap();
    let b = std::fs::read(&b_path).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);

    // Overlay appends theory columns for uniform/class rows.
    let c_path = dir.path().join("c.csv");
    run(&[
        "sweep-run",
        "--config",
        config_path.to_str().unwrap(),
        "--overlay-m-bar",
        "0.9",
        "--overlay-lambda",
        "50",
        "--out",
        c_path.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(&c_path).unwrap();
    assert!(text
        .lines()
        .next()
        .unwrap()
        .ends_with("theory_noisy,theory_clean"));
}

#[test]
fn embed_inject_exact_count_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let data_path = dir.path().join("features.csv");
    let mut body = String::from("id,label,f0,f1\n");
    for k in 0..3 {
        for i in 0..20 {
            body.push_str(&format!(
                "{k}_{i},{k},{},{}\n",
                k as f64 * 5.0 + (i % 5) as f64 * 0.1,
                (i % 3) as f64 * 0.1
            ));
        }
    }
    std::fs::write(&data_path, body).unwrap();

    let report_path = dir.path().join("report.json");
    let out_path = dir.path().join("noisy.csv");
    let out = run(&[
        "embed-inject",
        "--data",
        data_path.to_str().unwrap(),
        "--epsilon",
        "0.2",
        "--s",
        "1",
        "--mode",
        "class-dependent",
        "--count-mode",
        "exact-count",
        "--seed",
        "11",
        "--report",
        report_path.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success());

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["epsilon"], 0.2);
    assert_eq!(report["s"], 1);
    assert_eq!(report["realized_rate"], 0.2);
    let counts = report["transition_counts"].as_array().unwrap();
    assert_eq!(counts.len(), 3);

    let noisy = std::fs::read_to_string(&out_path).unwrap();
    let flipped = noisy
        .lines()
        .skip(1)
        .filter(|l| l.ends_with("true"))
        .count();
    assert_eq!(flipped, 12); // round(0.2 * 60)
}

#[test]
fn mlp_train_reports_accuracies() {
    let dir = tempfile::tempdir().unwrap();
    let train_path = dir.path().join("train.csv");
    let test_path = dir.path().join("test.csv");
    run(&[
        "mixture-gen",
        "--c",
        "2",
        "--d",
        "2",
        "--separated",
        "--sample-per-class",
        "40",
        "--seed",
        "1",
        "--out",
        train_path.to_str().unwrap(),
    ]);
    run(&[
        "mixture-gen",
        "--c",
        "2",
        "--d",
        "2",
        "--separated",
        "--sample-per-class",
        "40",
        "--seed",
        "2",
        "--out",
        test_path.to_str().unwrap(),
    ]);
    let params_path = dir.path().join("params.json");
    let out = run(&[
        "mlp-train",
        "--data",
        train_path.to_str().unwrap(),
        "--test",
        test_path.to_str().unwrap(),
        "--epochs",
        "100",
        "--seed",
        "4",
        "--params-out",
        params_path.to_str().unwrap(),
    ]);
    let report: serde_json::Value = serde_json::from_str(&stdout_of(&out)).unwrap();
    assert!(report["train_accuracy"]["mean"].as_f64().unwrap() >= 0.95);
    assert!(report["test_accuracy_clean"]["mean"].as_f64().unwrap() >= 0.95);
    assert!(params_path.exists());

    let params: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&params_path).unwrap()).unwrap();
    assert_eq!(params["layer_sizes"], serde_json::json!([2, 10, 10, 2]));
}

#[test]
fn config_schema_and_version_are_machine_readable() {
    let out = run(&["--config-schema"]);
    let schema: serde_json::Value = serde_json::from_str(&stdout_of(&out)).unwrap();
    assert_eq!(schema["type"], "object");
    assert!(schema["properties"]["epsilon_grid"].is_object());

    let out = run(&["--version"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("labelnoise"));
}

#[test]
fn exit_codes_reflect_error_classes() {
    // Unknown flag: clap usage error, exit 2.
    let out = bin().args(["theory-curve", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Unknown noise kind: parameter error, exit 2.
    let out = run_raw(&[
        "noise-apply",
        "--kind",
        "nonsense",
        "--epsilon",
        "0.1",
        "--data",
        "/nonexistent.csv",
    ]);
    assert_eq!(out.status.code(), Some(2));

    // Missing input file: data error, exit 3.
    let out = run_raw(&[
        "noise-apply",
        "--kind",
        "uniform",
        "--epsilon",
        "0.1",
        "--data",
        "/nonexistent.csv",
    ]);
    assert_eq!(out.status.code(), Some(3));

    // Malformed data row: parse error naming the line, exit 3.
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "id,label,f0\na,0,1.0\nb,1,oops\n").unwrap();
    let out = run_raw(&[
        "embed-inject",
        "--data",
        bad.to_str().unwrap(),
        "--epsilon",
        "0.1",
        "--s",
        "1",
        "--mode",
        "class-dependent",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    // Missing subcommand: exit 2.
    let out = bin().output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

fn run_raw(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

#[test]
fn diagnostics_go_to_stderr_not_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let mix_path = dir.path().join("mix.json");
    let data_path = dir.path().join("data.csv");
    run(&[
        "mixture-gen",
        "--c",
        "3",
        "--d",
        "1",
        "--sample-per-class",
        "30",
        "--seed",
        "2",
        "--out",
        data_path.to_str().unwrap(),
        "--mixture-out",
        mix_path.to_str().unwrap(),
    ]);
    let out = run(&[
        "noise-apply",
        "--kind",
        "resampling",
        "--epsilon",
        "0.3",
        "--data",
        data_path.to_str().unwrap(),
        "--mixture",
        mix_path.to_str().unwrap(),
    ]);
    // Calibration chatter stays on stderr; stdout is pure CSV.
    let stdout = stdout_of(&out);
    assert!(stdout.starts_with("id,label,noisy_label,f0"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("calibrated alpha"));
}
