use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_transaction");

const SMALL: &[&str] = &[
    "--n-verbs", "8", "--n-nouns", "10", "--n-actions", "16",
    "--d-rgb", "8", "--d-flow", "8", "--d-obj", "8", "--n-frames", "4",
];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn generate(dir: &Path, extra: &[&str]) {
    let mut args = vec!["generate", "--n-samples", "200", "--noise", "0.05", "--class-scale", "2"];
    args.extend(SMALL);
    args.extend(extra);
    let o = run(dir, &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn train_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec!["train", "--heads", "2"];
    if !extra.contains(&"--epochs") {
        args.extend(["--epochs", "3"]);
    }
    args.extend(SMALL);
    args.extend(extra);
    args
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["--help"][..], &["--version"], &["train", "--help"]] {
        assert_eq!(code(&run(dir.path(), args)), 0, "{args:?}");
    }
    let o = run(dir.path(), &["train", "--help"]);
    let help = String::from_utf8_lossy(&o.stdout);
    for flag in ["--batch-size", "--learning-rate", "--gamma", "--config", "--resume"] {
        assert!(help.contains(flag), "{flag} missing from help");
    }
}

#[test]
fn usage_errors_exit_one_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["train", "--no-such-flag", "1"][..],
        &["train", "--epochs", "many"],
        &["train", "--stop-at-train-accuracy", "90", "--eval-every", "0"],
        &["train", "--variant", "half"],
        &["evaluate", "--action-mode", "sum"],
        &["generate", "--n-actions", "3"],
        &["ablate", "--variants", "full,nothing"],
        &["bogus"],
    ] {
        let o = run(dir.path(), args);
        assert_eq!(code(&o), 1, "{args:?}: {}", stderr(&o));
        assert_eq!(stderr(&o).trim_end().lines().count(), 1, "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn missing_or_broken_files_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["train", "--features", "absent.tact"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("absent.tact"));

    generate(dir.path(), &[]);
    std::fs::write(dir.path().join("data/annotations.csv"), "sample_id,participant\n").unwrap();
    let o = run(dir.path(), &train_args(&[]));
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));

    let o = run(dir.path(), &["evaluate", "--checkpoints", "none.tack"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn non_finite_features_exit_three() {
    use transaction::synthetic::{generate as synth, SyntheticConfig};
    use transaction_core::data::Split;
    let dir = tempfile::tempdir().unwrap();
    let mut ds = synth(&SyntheticConfig {
        n_samples: 60,
        n_frames: 4,
        d_rgb: 8,
        d_flow: 8,
        d_obj: 8,
        n_verbs: 8,
        n_nouns: 10,
        n_actions: 16,
        ..Default::default()
    })
    .unwrap();
    let s = ds.samples.iter_mut().find(|s| s.split == Split::Train).unwrap();
    s.flow.data_mut()[5] = f32::NAN;
    std::fs::create_dir_all(dir.path().join("data")).unwrap();
    ds.write(&dir.path().join("data/features.tact"), &dir.path().join("data/annotations.csv")).unwrap();
    let o = run(dir.path(), &train_args(&[]));
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}

#[test]
fn train_twice_with_seed_gives_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &[]);
    let mut files = Vec::new();
    for out in ["a", "b"] {
        let o = run(dir.path(), &train_args(&["--seed", "7", "--out", out]));
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        files.push((
            std::fs::read(dir.path().join(out).join("logs/metrics.jsonl")).unwrap(),
            std::fs::read(dir.path().join(out).join("checkpoints/final.tack")).unwrap(),
        ));
    }
    assert_eq!(files[0], files[1]);
    let o = run(dir.path(), &train_args(&["--seed", "8", "--out", "c"]));
    assert_eq!(code(&o), 0);
    assert_ne!(std::fs::read(dir.path().join("c/checkpoints/final.tack")).unwrap(), files[0].1);
}

#[test]
fn effective_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &[]);
    let o = run(dir.path(), &train_args(&["--out", "first", "--gamma", "0.5", "--batch_size", "7"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let echo = std::fs::read_to_string(dir.path().join("first/effective.cfg")).unwrap();
    assert!(echo.contains("gamma = 0.5\n") && echo.contains("batch_size = 7\n"), "{echo}");
    std::fs::write(dir.path().join("again.cfg"), echo.replace("out = first", "out = second")).unwrap();
    let o = run(dir.path(), &["train", "--config", "again.cfg"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["checkpoints/final.tack", "logs/metrics.jsonl"] {
        assert_eq!(
            std::fs::read(dir.path().join("first").join(f)).unwrap(),
            std::fs::read(dir.path().join("second").join(f)).unwrap(),
            "{f}"
        );
    }
    // Flags win over the file.
    let o = run(dir.path(), &["train", "--config", "again.cfg", "--out", "third", "--epochs", "1"]);
    assert_eq!(code(&o), 0);
    let echo3 = std::fs::read_to_string(dir.path().join("third/effective.cfg")).unwrap();
    assert!(echo3.contains("epochs = 1\n") && echo3.contains("gamma = 0.5\n"));
}

#[test]
fn config_file_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.cfg"), "# ok\nepochs = 3\nwidth = 9\n").unwrap();
    let o = run(dir.path(), &["train", "--config", "a.cfg"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("a.cfg line 3") && stderr(&o).contains("width"), "{}", stderr(&o));
    std::fs::write(dir.path().join("b.cfg"), "n_samples = 10\n").unwrap();
    let o = run(dir.path(), &["train", "--config", "b.cfg"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("does not apply"), "{}", stderr(&o));
}

#[test]
fn perfect_predictor_scores_one_hundred_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &[]);
    let o = run(
        dir.path(),
        &train_args(&["--epochs", "40", "--stop-at-train-accuracy", "100", "--out", "fit"]),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let inputs = ["data/features.tact", "data/annotations.csv", "fit/checkpoints/final.tack"];
    let before: Vec<Vec<u8>> = inputs.iter().map(|f| std::fs::read(dir.path().join(f)).unwrap()).collect();
    let o = run(dir.path(), &["evaluate", "--checkpoints", "fit/checkpoints/final.tack"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let after: Vec<Vec<u8>> = inputs.iter().map(|f| std::fs::read(dir.path().join(f)).unwrap()).collect();
    assert_eq!(before, after, "evaluate must not touch its inputs");

    let text = std::fs::read_to_string(dir.path().join("runs/evaluate/reports/report.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let mut present = 0;
    for c in v["cells"].as_array().unwrap() {
        if let Some(x) = c["value"].as_f64() {
            assert_eq!(x, 100.0, "{c}");
            present += 1;
        }
    }
    assert!(present >= 6, "{present} cells present");
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("100.00"));
    assert_eq!(
        table,
        std::fs::read_to_string(dir.path().join("runs/evaluate/reports/report.txt")).unwrap()
    );
}

#[test]
fn ensemble_evaluation_and_resume_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &[]);
    for (out, seed) in [("m1", "1"), ("m2", "2")] {
        let o = run(dir.path(), &train_args(&["--out", out, "--seed", seed, "--checkpoint-every", "1"]));
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let o = run(
        dir.path(),
        &["evaluate", "--checkpoints", "m1/checkpoints/final.tack,m2/checkpoints/final.tack", "--split", "test", "--action-mode", "product"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("ensemble of 2"));

    // Resume m1 from epoch 2 and reach the same final checkpoint.
    let o = run(
        dir.path(),
        &["train", "--resume", "m1/checkpoints/epoch-0002.tack", "--epochs", "3", "--seed", "1", "--checkpoint-every", "1", "--out", "r1"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        std::fs::read(dir.path().join("m1/checkpoints/final.tack")).unwrap(),
        std::fs::read(dir.path().join("r1/checkpoints/final.tack")).unwrap()
    );
    // Explicit model flags that disagree with the checkpoint are contradictions.
    let o = run(dir.path(), &["train", "--resume", "m1/checkpoints/final.tack", "--heads", "4", "--out", "r2"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("contradiction"));
}

#[test]
fn gradcheck_passes_and_prints_every_operation() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gradcheck", "--trials", "1", "--probes", "20"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    for op in ["matmul", "layer_norm", "equalization_loss", "encoder_layer", "model[full]"] {
        assert!(text.lines().any(|l| l.starts_with(op) && l.ends_with("ok")), "{op}\n{text}");
    }
    assert!(dir.path().join("runs/gradcheck/effective.cfg").exists());
}

#[test]
fn ablate_renders_every_row() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), &[]);
    let mut args = vec!["ablate", "--heads", "2", "--epochs", "1"];
    args.extend(SMALL);
    let o = run(dir.path(), &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    for row in ["full", "tsa_only_rgb", "tsa_only_flow", "tsa_only_obj", "no_cma", "no_sa", "gamma0"] {
        assert!(table.lines().any(|l| l.starts_with(row)), "{row}\n{table}");
        assert!(dir.path().join("runs/ablate").join(row).join("checkpoints/final.tack").exists());
    }
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("runs/ablate/reports/ablation.json")).unwrap())
            .unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 7);
}

#[test]
fn generate_is_byte_deterministic_and_writes_its_echo() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["x", "y"] {
        let o = run(dir.path(), &["generate", "--n-samples", "50", "--seed", "5", "--out", out]);
        assert_eq!(code(&o), 0);
    }
    for f in ["features.tact", "annotations.csv"] {
        assert_eq!(
            std::fs::read(dir.path().join("x").join(f)).unwrap(),
            std::fs::read(dir.path().join("y").join(f)).unwrap()
        );
    }
    let echo = std::fs::read_to_string(dir.path().join("x/effective.cfg")).unwrap();
    assert!(echo.contains("seed = 5\n") && echo.contains("n_samples = 50\n"));
}
