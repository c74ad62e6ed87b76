use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
name = "tiny_cli"
trials = 1
master_seed = 3

[graph]
topology = "ring"
n_workers = 3

[compression]
compressor = "rand_k"
k = 2

[model]
width = 2
input_dim = 3
n_classes = 2

[data]
n_per_class = 10
class_sep = 2.0
batch_size = 2

[engine]
algorithm = "choco"
gamma = 0.3
eta = 0.1
epochs = 2

[sweep]
"engine.algorithm" = ["choco", "dsgd"]
"#;

fn chocosim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chocosim"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_spec(dir: &Path, text: &str) -> String {
    let path = dir.join("spec.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn lists_and_shows_presets() {
    let out = chocosim(&["list-presets"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for name in [
        "width_sweep",
        "consensus_study",
        "topology_sweep",
        "hetero_study",
    ] {
        assert!(text.contains(name), "{text}");
    }
    let shown = chocosim(&["show-preset", "width_sweep"]);
    assert!(shown.status.success());
    assert!(stdout(&shown).contains("[sweep]"));
    assert_eq!(chocosim(&["show-preset", "nope"]).status.code(), Some(2));
}

#[test]
fn validate_distinguishes_good_and_bad_specs() {
    let tmp = tempfile::tempdir().unwrap();
    let good = write_spec(tmp.path(), TINY);
    let out = chocosim(&["validate", "--spec", &good]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("2 cells"));

    let bad = write_spec(tmp.path(), &TINY.replace("k = 2", "k = 0"));
    assert_eq!(
        chocosim(&["validate", "--spec", &bad]).status.code(),
        Some(2)
    );

    let unknown = write_spec(
        tmp.path(),
        &TINY.replace("epochs = 2", "epochs = 2\nwarp = 9"),
    );
    assert_eq!(
        chocosim(&["validate", "--spec", &unknown]).status.code(),
        Some(2)
    );
}

#[test]
fn run_reuse_force_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_spec(tmp.path(), TINY);
    let out_dir = tmp.path().join("results");
    let out = out_dir.to_str().unwrap();

    let first = chocosim(&["run", "--spec", &spec, "--out", out, "--threads", "2"]);
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(stderr(&first).contains("2 runs (0 reused)"));
    assert!(stdout(&first).contains("engine.algorithm"));

    let root = out_dir.join("tiny_cli");
    for run in std::fs::read_dir(root.join("runs")).unwrap() {
        assert_eq!(std::fs::read_dir(run.unwrap().path()).unwrap().count(), 3);
    }
    let aggregate = std::fs::read(root.join("aggregate.csv")).unwrap();

    let again = chocosim(&["run", "--spec", &spec, "--out", out]);
    assert!(stderr(&again).contains("2 runs (2 reused)"));
    let forced = chocosim(&["run", "--spec", &spec, "--out", out, "--force"]);
    assert!(stderr(&forced).contains("2 runs (0 reused)"));
    assert_eq!(
        std::fs::read(root.join("aggregate.csv")).unwrap(),
        aggregate
    );

    let report = chocosim(&["report", "--dir", root.to_str().unwrap()]);
    assert!(report.status.success());
    assert_eq!(stdout(&report), stdout(&first));
}

#[test]
fn run_errors_have_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("none.toml");
    assert_ne!(
        chocosim(&["run", "--spec", missing.to_str().unwrap()])
            .status
            .code(),
        Some(0)
    );
    assert_eq!(
        chocosim(&[
            "run",
            "--preset",
            "nope",
            "--out",
            tmp.path().to_str().unwrap()
        ])
        .status
        .code(),
        Some(2)
    );
    // clap rejects conflicting flags before anything runs.
    assert!(!chocosim(&["run", "--spec", "a", "--preset", "b"])
        .status
        .success());
}
