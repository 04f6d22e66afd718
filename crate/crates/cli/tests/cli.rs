use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "\
n_train = 20
n_test = 10
train.epochs = 3
budgets = 5,8
shift.class_seed = 3
trace_tasks = 5
trace_k = 6
";

fn vas(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vas"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = vas(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("exp.cfg"), CONFIG).unwrap();
    ok(d, &["gen", "--config", "exp.cfg", "--out", "data"]);
    for split in ["train", "test", "shifted"] {
        assert!(
            d.join("data").join(split).join("manifest.json").exists(),
            "{split}"
        );
    }
    ok(
        d,
        &[
            "train",
            "--config",
            "exp.cfg",
            "--data",
            "data/train",
            "--out",
            "models",
        ],
    );
    for m in ["vas", "vas-no-rsb", "greedy-select", "greedy-class"] {
        assert!(d.join("models").join(format!("{m}.vasp")).exists(), "{m}");
    }
    let table = ok(
        d,
        &[
            "eval",
            "--config",
            "exp.cfg",
            "--data",
            "data/test",
            "--model",
            "models",
            "--out",
            "res",
        ],
    );
    assert!(table.starts_with("method,N,K,mean_esr,stderr,n_tasks"));
    assert_eq!(table.lines().count(), 1 + 5 * 2);
    for f in ["results.csv", "traces.csv"] {
        assert!(d.join("res").join(f).exists(), "{f}");
    }
    let shifted = ok(
        d,
        &[
            "adapt",
            "--config",
            "exp.cfg",
            "--data",
            "data/test",
            "--shifted",
            "data/shifted",
            "--model",
            "models",
            "--mode",
            "none",
            "--mode",
            "online",
            "--out",
            "adapt",
        ],
    );
    assert!(shifted.contains("vas-online"));
    ok(
        d,
        &[
            "trace",
            "--config",
            "exp.cfg",
            "--data",
            "data/test",
            "--model",
            "models",
            "--out",
            "tr",
        ],
    );
    assert!(d.join("tr").join("divergence.csv").exists());
}

#[test]
fn unknown_subcommand_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(vas(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(vas(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn corrupt_dataset_exits_with_two_and_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("exp.cfg"), CONFIG).unwrap();
    ok(d, &["gen", "--config", "exp.cfg", "--out", "data"]);
    let victim = d.join("data/train/task-00003.vasf");
    let bytes = fs::read(&victim).unwrap();
    fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
    let out = vas(
        d,
        &[
            "train",
            "--config",
            "exp.cfg",
            "--data",
            "data/train",
            "--out",
            "models",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("task-00003.vasf"));
}

#[test]
fn diverging_training_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("exp.cfg"),
        format!("{CONFIG}train.learning_rate = 1.7e308\nmethods = vas\n"),
    )
    .unwrap();
    ok(d, &["gen", "--config", "exp.cfg", "--out", "data"]);
    let out = vas(
        d,
        &[
            "train",
            "--config",
            "exp.cfg",
            "--data",
            "data/train",
            "--out",
            "models",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "no_such_key = 1\n").unwrap();
    let out = vas(dir.path(), &["gen", "--config", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(1));
}
