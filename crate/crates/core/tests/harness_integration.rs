use std::path::Path;

use chocosim::harness::{self, presets, run_experiment, ExperimentSpec, RunOptions};
use chocosim::metrics::read_metrics_csv;

const TINY: &str = r#"
name = "tiny"
trials = 2
master_seed = 5

[graph]
topology = "ring"
n_workers = 4

[compression]
compressor = "top_k"
k = 4

[model]
width = 4
input_dim = 4
n_classes = 3

[data]
n_per_class = 20
class_sep = 2.0
batch_size = 4

[engine]
algorithm = "choco"
gamma = 0.2
eta = 0.2
epochs = 3

[sweep]
"model.width" = [4, 8]
"#;

fn tiny() -> ExperimentSpec {
    ExperimentSpec::from_toml_str(TINY).unwrap()
}

fn opts(dir: &Path, force: bool) -> RunOptions {
    RunOptions {
        out_dir: Some(dir.to_path_buf()),
        force,
        threads: Some(2),
    }
}

#[test]
fn every_run_directory_holds_three_files() {
    let tmp = tempfile::tempdir().unwrap();
    let res = run_experiment(&tiny(), &opts(tmp.path(), false)).unwrap();
    let root = res.dir.clone().unwrap();
    assert!(root.join("experiment.toml").is_file());
    assert!(root.join("aggregate.csv").is_file());
    let runs: Vec<_> = std::fs::read_dir(root.join("runs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(runs.len(), 4);
    for dir in runs {
        let mut names: Vec<String> = std::fs::read_dir(&dir)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names, ["metrics.csv", "run.json", "status.json"]);
    }
}

#[test]
fn reruns_reuse_results_unless_forced() {
    let tmp = tempfile::tempdir().unwrap();
    let first = run_experiment(&tiny(), &opts(tmp.path(), false)).unwrap();
    assert!(first
        .cells
        .iter()
        .flat_map(|c| &c.trials)
        .all(|t| !t.reused));
    let csv = std::fs::read(first.dir.as_ref().unwrap().join("aggregate.csv")).unwrap();

    let second = run_experiment(&tiny(), &opts(tmp.path(), false)).unwrap();
    assert!(second
        .cells
        .iter()
        .flat_map(|c| &c.trials)
        .all(|t| t.reused));
    assert_eq!(
        std::fs::read(second.dir.as_ref().unwrap().join("aggregate.csv")).unwrap(),
        csv
    );

    let forced = run_experiment(&tiny(), &opts(tmp.path(), true)).unwrap();
    assert!(forced
        .cells
        .iter()
        .flat_map(|c| &c.trials)
        .all(|t| !t.reused));
    assert_eq!(forced.aggregate_csv().unwrap(), csv);
}

#[test]
fn changed_config_is_not_reused() {
    let tmp = tempfile::tempdir().unwrap();
    run_experiment(&tiny(), &opts(tmp.path(), false)).unwrap();
    let mut spec = tiny();
    spec.engine.eta = 0.1;
    let res = run_experiment(&spec, &opts(tmp.path(), false)).unwrap();
    assert!(res.cells.iter().flat_map(|c| &c.trials).all(|t| !t.reused));
}

#[test]
fn aggregate_is_the_mean_over_trials() {
    let tmp = tempfile::tempdir().unwrap();
    let res = run_experiment(&tiny(), &opts(tmp.path(), false)).unwrap();
    for (cell, row) in res.cells.iter().zip(&res.aggregate) {
        // Read back from disk so the files and the in-memory result agree too.
        let finals: Vec<f64> = (0..2)
            .map(|t| {
                let dir = res
                    .dir
                    .as_ref()
                    .unwrap()
                    .join("runs")
                    .join(format!("c{:03}_t{t:02}", cell.cell.index));
                let recs = read_metrics_csv(std::fs::File::open(dir.join("metrics.csv")).unwrap())
                    .unwrap();
                recs.last().unwrap().train_loss_global
            })
            .collect();
        let mean = finals.iter().sum::<f64>() / 2.0;
        let stat = row.stat("train_loss_global").unwrap();
        assert_eq!(stat.n, 2);
        assert!((stat.mean - mean).abs() < 1e-12);
    }
}

#[test]
fn single_trial_without_sweep_reports_the_run() {
    let mut spec = tiny();
    spec.sweep.clear();
    spec.trials = 1;
    let res = run_experiment(&spec, &RunOptions::default()).unwrap();
    assert_eq!(res.aggregate.len(), 1);
    let run = res.cells[0].trials[0].outcome.final_record().unwrap();
    let stat = res.aggregate[0].stat("train_loss_global").unwrap();
    assert_eq!(stat.mean, run.train_loss_global);
    assert_eq!(stat.n, 1);
}

#[test]
fn divergence_is_recorded_not_raised() {
    let mut spec = tiny();
    spec.sweep.clear();
    spec.trials = 1;
    spec.engine.eta = 1e100;
    spec.model.loss = chocosim::LossKind::Quadratic;
    let tmp = tempfile::tempdir().unwrap();
    let res = run_experiment(&spec, &opts(tmp.path(), false)).unwrap();
    assert!(res.cells[0].trials[0].outcome.diverged());
    assert_eq!(res.aggregate[0].diverged, 1);
    let status =
        std::fs::read_to_string(res.dir.unwrap().join("runs/c000_t00/status.json")).unwrap();
    assert!(status.contains("diverged"), "{status}");
}

#[test]
fn repeated_invocations_are_byte_identical() {
    let a = run_experiment(
        &tiny(),
        &RunOptions {
            threads: Some(1),
            ..Default::default()
        },
    )
    .unwrap();
    let b = run_experiment(
        &tiny(),
        &RunOptions {
            threads: Some(3),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(a.aggregate_csv().unwrap(), b.aggregate_csv().unwrap());
}

#[test]
fn report_renders_the_aggregate() {
    let tmp = tempfile::tempdir().unwrap();
    let res = run_experiment(&tiny(), &opts(tmp.path(), false)).unwrap();
    let table = harness::report(res.dir.as_ref().unwrap()).unwrap();
    assert!(table.contains("model.width"));
    assert!(table.contains("train_loss_global"));
    assert!(harness::report(&tmp.path().join("missing")).is_err());
}

#[test]
fn presets_round_trip_through_toml() {
    for (name, _) in presets::list() {
        let spec = presets::preset(name).unwrap();
        let again = ExperimentSpec::from_toml_str(&spec.to_toml_string().unwrap()).unwrap();
        assert_eq!(spec, again);
    }
}
