mod common;

use cmmloc::harness::pipeline::{self, RunDir};
use cmmloc::harness::{run_end_to_end, Checkpoint, ResultsTable};
use cmmloc::Error;

#[test]
fn stages_fill_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny();
    let table = run_end_to_end(&cfg, dir.path()).unwrap();
    let run = RunDir::new(dir.path());
    for path in [
        run.config(),
        run.split("train"),
        run.split("test"),
        run.checkpoint("coarse"),
        run.checkpoint("prealign"),
        run.checkpoint("fine"),
        run.log("coarse"),
        run.localization(),
        run.results(),
        run.report(),
    ] {
        assert!(path.exists(), "{} missing", path.display());
    }
    assert_eq!(ResultsTable::load_csv(&run.results()).unwrap(), table);
    let grid: Vec<_> = table.rows.iter().filter(|r| r.metric == "localization_recall").collect();
    assert_eq!(grid.len(), 9);
    assert!(std::fs::read_to_string(run.report()).unwrap().contains(&cfg.hash()));
}

#[test]
fn reloaded_checkpoints_reproduce_the_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny();
    let run = RunDir::new(dir.path());
    let [_, _, test] = pipeline::generate(&cfg, &run).unwrap();
    let coarse = pipeline::train_coarse_stage(&cfg, &run).unwrap();
    pipeline::prealign_stage(&cfg, &run).unwrap();
    let fine = pipeline::train_fine_stage(&cfg, &run).unwrap();
    let (direct, _, _) = pipeline::evaluate(&cfg, "x", &coarse, &fine, &test).unwrap();
    let from_disk = pipeline::eval_stage(&cfg, &run).unwrap();
    let values = |t: &ResultsTable| t.rows.iter().map(|r| r.value.to_bits()).collect::<Vec<_>>();
    assert_eq!(values(&direct), values(&from_disk));
}

#[test]
fn eval_without_checkpoint_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny();
    let run = RunDir::new(dir.path());
    pipeline::generate(&cfg, &run).unwrap();
    let err = pipeline::eval_stage(&cfg, &run).unwrap_err();
    match err {
        Error::MissingArtifact(p) => assert_eq!(p, run.checkpoint("coarse")),
        other => panic!("unexpected {other}"),
    }
    assert!(!run.results().exists());
}

#[test]
fn checkpoint_from_another_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny();
    let run = RunDir::new(dir.path());
    pipeline::generate(&cfg, &run).unwrap();
    pipeline::train_coarse_stage(&cfg, &run).unwrap();
    let mut other = cfg.clone();
    other.coarse.train.temperature = 0.2;
    assert!(matches!(pipeline::load_coarse(&other, &run), Err(Error::Checkpoint(_))));
    let ck = Checkpoint::load(&run.checkpoint("coarse")).unwrap();
    assert_eq!(ck.stage, "coarse");
}

#[test]
fn failures_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny();
    cfg.data.queries_per_scene = 0;
    let err = run_end_to_end(&cfg, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "config", .. }), "{err}");
}
