//! End-to-end tests of the `lambdaunet` binary: exit codes, the
//! gen -> train -> eval flow, config-file precedence, and reproducibility.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lambdaunet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Tiny dataset fast enough for end-to-end tests.
fn gen_tiny(dir: &Path) {
    let out = run(&[
        "gen",
        "--out",
        dir.to_str().unwrap(),
        "--cases",
        "6",
        "--seed",
        "7",
        "--geometry",
        "2,16,16",
        "--radius",
        "2,4",
        "--extent",
        "1,2",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn no_subcommand_is_a_usage_error() {
    let out = run(&[]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gen_requires_positive_case_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gen", "--out", dir.path().to_str().unwrap(), "--cases", "0"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gen_rejects_bad_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen",
        "--out",
        dir.path().to_str().unwrap(),
        "--cases",
        "6",
        "--ratios",
        "0.9,0.9,0.9",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn eval_on_missing_checkpoint_is_a_file_error() {
    let dir = tempfile::tempdir().unwrap();
    gen_tiny(dir.path());
    let out = run(&[
        "eval",
        "--model",
        dir.path().join("nope.ckpt").to_str().unwrap(),
        "--data",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn train_on_corrupt_case_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    gen_tiny(dir.path());
    // truncate one case file
    let victim = dir.path().join("case_0000.v25d");
    let bytes = std::fs::read(&victim).unwrap();
    std::fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
    let out = run(&[
        "train",
        "--data",
        dir.path().to_str().unwrap(),
        "--out",
        dir.path().join("m.ckpt").to_str().unwrap(),
        "--epochs",
        "1",
        "--warmup",
        "0",
        "--levels",
        "2",
        "--base-channels",
        "2",
        "--k",
        "2",
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn bench_rejects_zero_reps_and_even_tk_is_rejected_by_ablate() {
    let out = run(&["bench", "--shapes", "1x2x8x8x4", "--reps", "0"]);
    assert_eq!(code(&out), 2);
    let dir = tempfile::tempdir().unwrap();
    gen_tiny(dir.path());
    let out = run(&[
        "ablate",
        "--data",
        dir.path().to_str().unwrap(),
        "--tk",
        "3,4",
        "--out",
        dir.path().join("a.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn gen_train_eval_flow_and_rerun_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    gen_tiny(dir.path());
    assert!(dir.path().join("manifest.json").exists());
    assert!(dir.path().join("run_gen.json").exists());

    let train_args = |out: &Path| {
        vec![
            "train".to_string(),
            "--data".into(),
            dir.path().to_str().unwrap().into(),
            "--out".into(),
            out.to_str().unwrap().into(),
            "--epochs".into(),
            "2".into(),
            "--warmup".into(),
            "1".into(),
            "--lr".into(),
            "1e-3".into(),
            "--batch-segments".into(),
            "2".into(),
            "--segment-slices".into(),
            "2".into(),
            "--levels".into(),
            "2".into(),
            "--base-channels".into(),
            "2".into(),
            "--k".into(),
            "2".into(),
            "--seed".into(),
            "1".into(),
        ]
    };
    let ck_a = dir.path().join("a.ckpt");
    let ck_b = dir.path().join("b.ckpt");
    for ck in [&ck_a, &ck_b] {
        let args = train_args(ck);
        let out = bin().args(&args).output().unwrap();
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        assert!(ck.exists());
    }
    // bit-exact rerun: identical checkpoints and run manifests record the command
    assert_eq!(std::fs::read(&ck_a).unwrap(), std::fs::read(&ck_b).unwrap());
    let manifest = std::fs::read_to_string(dir.path().join("run_train.json")).unwrap();
    assert!(manifest.contains("\"command\": \"train\""));

    let report = dir.path().join("metrics.json");
    let out = run(&[
        "eval",
        "--model",
        ck_a.to_str().unwrap(),
        "--data",
        dir.path().to_str().unwrap(),
        "--split",
        "test",
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    for col in ["DSC", "Recall", "Precision", "F1"] {
        assert!(text.contains(col), "missing column {col} in:\n{text}");
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let dsc = json["mean_dsc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&dsc));
}

#[test]
fn config_file_supplies_flags_and_cli_takes_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(
        &cfg,
        format!(
            "[gen]\nout = \"{}\"\ncases = 5\nseed = 9\ngeometry = \"2,16,16\"\nextent = \"1,2\"\nradius = \"2,4\"\n",
            dir.path().join("d1").display()
        ),
    )
    .unwrap();
    // all flags from the file
    let out = run(&["gen", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("d1/manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["cases"].as_array().unwrap().len(), 5);

    // command line overrides the file
    let d2 = dir.path().join("d2");
    let out = run(&[
        "gen",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        d2.to_str().unwrap(),
        "--cases",
        "3",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d2.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["cases"].as_array().unwrap().len(), 3);
}

#[test]
fn check_suites_pass_quickly_at_small_trial_counts() {
    for suite in ["oracle", "grad", "locality"] {
        let mut args = vec!["check", "--suite", suite];
        if suite == "oracle" {
            args.extend(["--trials", "5"]);
        }
        let out = run(&args);
        assert_eq!(code(&out), 0, "suite {suite}: {}", stderr(&out));
    }
    let out = run(&["check", "--suite", "bogus"]);
    assert_eq!(code(&out), 2);
}
