use std::fs;

use pathrl_core::drl::TrainConfig;
use pathrl_core::harness::{self, load_runs, report, run_plan, ExperimentPlan, Model, RunMetrics, Sweep};
use pathrl_core::synthgen::UseCase;

fn small_plan() -> ExperimentPlan {
    ExperimentPlan {
        models: vec![
            "dqn".parse().unwrap(),
            Model::DecisionTree,
            Model::Random,
            Model::TreeAgent,
        ],
        seeds: vec![0, 1],
        records: 400,
        timesteps: 1500,
        combined_missingness: vec![0.3],
        train_fractions: vec![0.5],
        train: TrainConfig {
            learning_starts: 300,
            target_update_interval: 200,
            checkpoints: 3,
            ..Default::default()
        },
        workers: Some(2),
        ..Default::default()
    }
}

fn strip_clock(mut runs: Vec<RunMetrics>) -> Vec<RunMetrics> {
    for r in &mut runs {
        r.wall_seconds = 0.0;
    }
    runs.sort_by_key(|r| (r.condition.sweep, r.model, r.seed, r.condition.level.to_bits()));
    runs
}

#[test]
fn plan_writes_runs_checkpoints_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let plan = small_plan();
    let out = run_plan(&plan, dir.path()).unwrap();
    assert!(out.failures.is_empty(), "{:?}", out.failures);
    assert_eq!(out.runs.len(), 3 * 4 * 2);

    let run = dir.path().join("cells/clean/dqn/run_1");
    for f in [
        "metrics.json",
        "best.policy",
        "best.episodes.json",
        "ckpt_0.policy",
        "ckpt_1500.policy",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let tree_agent = out
        .runs
        .iter()
        .find(|r| r.model == Model::TreeAgent && r.condition.sweep == Sweep::Clean)
        .unwrap();
    assert_eq!(tree_agent.report.accuracy, 1.0);

    // every cell of a seed evaluates on one test split
    for seed in [0, 1] {
        let mut hashes: Vec<&str> = out
            .runs
            .iter()
            .filter(|r| r.seed == seed)
            .map(|r| r.test_hash.as_str())
            .collect();
        hashes.dedup();
        assert_eq!(hashes.len(), 1);
    }
    let half = out.runs.iter().find(|r| r.condition.sweep == Sweep::TrainSize).unwrap();
    let full = out
        .runs
        .iter()
        .find(|r| r.condition.sweep == Sweep::Clean && r.seed == half.seed)
        .unwrap();
    assert_eq!(half.train_size, (full.train_size as f64 * 0.5).round() as usize);

    let rows = &out.report.rows;
    assert_eq!(rows.len(), 3 * 4);
    assert!(rows.iter().all(|r| r.n() == 2));
    assert!(out.report.warnings.is_empty());
    let summary = fs::read_to_string(dir.path().join("report/summary.md")).unwrap();
    assert!(summary.contains("## combined_0.3"));
    assert!(summary.contains("| tree-agent | 100.00 ± 0.00 |"));
    let csv = fs::read_to_string(dir.path().join("report/combined_accuracy.csv")).unwrap();
    assert!(csv.starts_with("level,model,mean,sd,n,ci95\n0.3,dqn,"));

    // deterministic re-report
    let before: Vec<Vec<u8>> = out.report.files.iter().map(|f| fs::read(f).unwrap()).collect();
    let again = report(dir.path()).unwrap();
    assert_eq!(again.files, out.report.files);
    let after: Vec<Vec<u8>> = again.files.iter().map(|f| fs::read(f).unwrap()).collect();
    assert_eq!(before, after);

    // a missing run is reported with n below plan
    fs::remove_file(dir.path().join("cells/clean/dt/run_0/metrics.json")).unwrap();
    let partial = report(dir.path()).unwrap();
    let dt = partial
        .rows
        .iter()
        .find(|r| r.model == Model::DecisionTree && r.condition.sweep == Sweep::Clean)
        .unwrap();
    assert_eq!((dt.n(), dt.planned), (1, Some(2)));
    assert_eq!(partial.warnings, vec!["clean dt: 1 of 2 runs".to_owned()]);
}

#[test]
fn permuting_plan_order_leaves_cells_unchanged() {
    let mut a = small_plan();
    a.models = vec!["dqn".parse().unwrap(), Model::Random];
    a.train_fractions.clear();
    let mut b = a.clone();
    b.models.reverse();
    b.seeds.reverse();
    b.workers = Some(1);
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_plan(&a, da.path()).unwrap();
    run_plan(&b, db.path()).unwrap();
    let ra = strip_clock(load_runs(&da.path().join("cells")).unwrap());
    let rb = strip_clock(load_runs(&db.path().join("cells")).unwrap());
    assert_eq!(ra.len(), 8);
    assert_eq!(ra, rb);
    let policy = "cells/clean/dqn/run_0/best.policy";
    assert_eq!(
        fs::read(da.path().join(policy)).unwrap(),
        fs::read(db.path().join(policy)).unwrap()
    );
}

#[test]
fn failing_cell_is_recorded_and_plan_continues() {
    let mut plan = small_plan();
    plan.models = vec![Model::Ffnn, Model::Random];
    plan.ffnn.batch_size = 0;
    plan.combined_missingness.clear();
    plan.train_fractions.clear();
    let dir = tempfile::tempdir().unwrap();
    let out = run_plan(&plan, dir.path()).unwrap();
    assert_eq!(out.runs.len(), 2);
    assert_eq!(out.failures.len(), 2);
    assert!(out.failures.iter().all(|f| f.cell.model == Model::Ffnn));
    let recorded: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("failures.json")).unwrap()).unwrap();
    assert_eq!(recorded.as_array().unwrap().len(), 2);
    assert_eq!(out.report.warnings.len(), 1);
}

#[test]
fn lupus_lambda_sweep_and_classifiers() {
    let plan = ExperimentPlan {
        use_case: UseCase::Lupus,
        models: vec!["ddqn".parse().unwrap(), Model::DecisionTree],
        seeds: vec![3],
        clean: false,
        lambdas: vec![1.0, 9.0],
        missingness: vec![0.2],
        ..small_plan()
    };
    let dir = tempfile::tempdir().unwrap();
    let out = run_plan(&plan, dir.path()).unwrap();
    assert!(out.failures.is_empty(), "{:?}", out.failures);
    assert_eq!(out.runs.len(), 5 * 2);
    for r in out.runs.iter().filter(|r| r.model.is_drl()) {
        assert!(r.report.wpahm.is_some());
        let lambda = r.config["env"]["lambda"].as_f64().unwrap();
        let expected = if r.condition.sweep == Sweep::Lambda {
            r.condition.level
        } else {
            harness::DEFAULT_LAMBDA
        };
        assert_eq!(lambda, expected);
    }
    assert!(dir.path().join("report/lambda_wpahm.csv").is_file());
}

#[test]
fn empty_results_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(report(dir.path()).is_err());
}
