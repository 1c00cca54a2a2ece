mod common;

use std::fs;

use common::tiny_config;
use prefrl::config::Method;
use prefrl::formats::{file_digest, read_metrics};
use prefrl::harness::{
    run_experiment, run_lagrange_sweep, HarnessError, OracleHandle, PhaseStatus, RunManifest, RunOptions, MANIFEST_FILE,
};
use prefrl::report::{compare_report, load_manifests};
use prefrl::runner::ThreadedRunner;
use prefrl_core::policy::ConstraintSpec;

fn run(config: &prefrl::config::ExperimentConfig, options: RunOptions) -> Result<RunManifest, HarnessError> {
    run_experiment(config, &mut OracleHandle::Scripted, &ThreadedRunner::new(config.workers), options)
}

#[test]
fn manifest_lists_phases_and_digests() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let manifest = run(&config, RunOptions::default()).unwrap();

    let names: Vec<&str> = manifest.phases.iter().map(|p| p.name.as_str()).collect();
    assert_eq!(
        names,
        ["collect", "fit", "train/predictor/seed0", "train/predictor/seed1", "train/original/seed0", "train/original/seed1"]
    );
    for phase in &manifest.phases {
        assert_eq!(phase.status, PhaseStatus::Completed);
        assert!(!phase.resumed);
        assert!(phase.wall_clock_secs >= 0.0);
        for out in &phase.outputs {
            assert_eq!(file_digest(&dir.path().join(&out.path)).unwrap(), out.digest);
        }
    }
    let discards = manifest.phase("collect").unwrap().discards.unwrap();
    assert_eq!(discards.total(), 0);
    for path in manifest.artifact_paths() {
        assert!(dir.path().join(&path).is_file(), "{}", path.display());
    }
    assert_eq!(RunManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap(), manifest);

    let losses = fs::read_to_string(dir.path().join("reward_model_loss.csv")).unwrap();
    assert!(losses.starts_with("epoch,loss\n1,"));
    assert_eq!(losses.lines().count(), config.reward_model.epochs + 1);

    let trace = read_metrics(&dir.path().join("metrics/predictor_seed0.csv")).unwrap();
    assert_eq!(trace.grid(), vec![0, 1000, 2000]);
    assert!(trace.rows.iter().all(|r| r.predictor_reward_mean.is_some() && r.cost_mean.is_none()));
}

#[test]
fn identical_configs_give_identical_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut config = tiny_config(a.path());
    run(&config, RunOptions::default()).unwrap();
    config.output_dir = b.path().to_path_buf();
    config.workers = 3;
    run(&config, RunOptions::default()).unwrap();
    for file in ["metrics/predictor_seed0.csv", "metrics/original_seed1.csv", "dataset.json", "reward_model.json"] {
        assert_eq!(fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap(), "{file}");
    }
}

#[test]
fn interrupted_runs_resume_without_redoing_work() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let err = run(&config, RunOptions { train_run_limit: Some(1) }).unwrap_err();
    assert!(matches!(err, HarnessError::Interrupted(1)));
    let partial = RunManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(partial.phases.len(), 3);
    let first_metrics = fs::read(dir.path().join("metrics/predictor_seed0.csv")).unwrap();

    let resumed = run(&config, RunOptions::default()).unwrap();
    let flags: Vec<bool> = resumed.phases.iter().map(|p| p.resumed).collect();
    assert_eq!(flags, [true, true, true, false, false, false]);
    assert_eq!(fs::read(dir.path().join("metrics/predictor_seed0.csv")).unwrap(), first_metrics);

    // The sampler inherits the training PPO settings, so changing them
    // reruns collection; the dataset comes out identical and the fit is reused.
    let mut changed = config.clone();
    changed.ppo.entropy_coef = 0.02;
    let rerun = run(&changed, RunOptions::default()).unwrap();
    let flags: Vec<bool> = rerun.phases.iter().map(|p| p.resumed).collect();
    assert_eq!(flags, [false, true, false, false, false, false]);

    // With its own sampler settings, collection is independent of training.
    changed.sampler.ppo = Some(changed.ppo);
    run(&changed, RunOptions::default()).unwrap();
    changed.ppo.entropy_coef = 0.03;
    let rerun = run(&changed, RunOptions::default()).unwrap();
    let flags: Vec<bool> = rerun.phases.iter().map(|p| p.resumed).collect();
    assert_eq!(flags, [true, true, false, false, false, false]);
}

#[test]
fn tampered_outputs_are_recomputed() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let first = run(&config, RunOptions::default()).unwrap();
    fs::write(dir.path().join("metrics/original_seed1.csv"), "garbage").unwrap();
    let second = run(&config, RunOptions::default()).unwrap();
    let resumed: Vec<bool> = second.phases.iter().map(|p| p.resumed).collect();
    assert_eq!(resumed, [true, true, true, true, true, false]);
    assert_eq!(second.phase("train/original/seed1").unwrap().outputs, first.phase("train/original/seed1").unwrap().outputs);
}

#[test]
fn report_aligns_methods_across_manifests() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let config = tiny_config(a.path());
    run(&config, RunOptions::default()).unwrap();
    let mut other = config.clone();
    other.output_dir = b.path().to_path_buf();
    other.methods = vec![Method::Shaped, Method::Random];
    run(&other, RunOptions::default()).unwrap();

    let table = compare_report(&load_manifests(&[a.path().into(), b.path().join(MANIFEST_FILE)]).unwrap()).unwrap();
    assert_eq!(table.grid, vec![0, 1000, 2000]);
    let labels: Vec<&str> = table.columns_for("success_rate").iter().map(|c| c.label.as_str()).collect();
    assert_eq!(labels, ["original", "predictor", "random", "shaped"]);
    for c in table.columns_for("success_rate") {
        assert_eq!(c.seeds, 2);
        for i in 0..table.grid.len() {
            assert!(c.stats.min[i] <= c.stats.mean[i] && c.stats.mean[i] <= c.stats.max[i]);
        }
    }
    // Runs of an experiment with a fitted predictor also report its score.
    let predicted: Vec<&str> = table.columns_for("predictor_reward_mean").iter().map(|c| c.label.as_str()).collect();
    assert_eq!(predicted, ["original", "predictor"]);
    let csv = table.to_csv();
    assert!(csv.starts_with("env_steps,original:success_rate:mean,original:success_rate:min,original:success_rate:max,"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn report_of_one_manifest_and_mismatches() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let config = tiny_config(a.path());
    run(&config, RunOptions::default()).unwrap();
    let single = compare_report(&load_manifests(&[a.path().into()]).unwrap()).unwrap();
    assert_eq!(single.columns_for("success_rate").len(), 2);

    // The same method in two manifests gets the manifest index attached.
    let twice = compare_report(&load_manifests(&[a.path().into(), a.path().into()]).unwrap()).unwrap();
    let labels: Vec<&str> = twice.columns_for("env_reward_mean").iter().map(|c| c.label.as_str()).collect();
    assert_eq!(labels, ["original@0", "original@1", "predictor@0", "predictor@1"]);

    let mut other = config.clone();
    other.output_dir = b.path().to_path_buf();
    other.methods = vec![Method::Original];
    other.ppo.eval_interval = 500;
    run(&other, RunOptions::default()).unwrap();
    let err = compare_report(&load_manifests(&[a.path().into(), b.path().into()]).unwrap()).unwrap_err();
    assert!(err.to_string().contains("grid mismatch"), "{err}");
    assert!(load_manifests(&[b.path().join("missing")]).is_err());
    assert!(compare_report(&[]).is_err());
}

#[test]
fn sweep_writes_traces_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path());
    config.constraint = Some(ConstraintSpec::new(3));
    config.seeds = vec![4];
    let rows = run_lagrange_sweep(&config, &[0.0, 1.0], &ThreadedRunner::new(1)).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].1.grid(), rows[1].1.grid());
    let summary = fs::read_to_string(dir.path().join("sweep/summary.csv")).unwrap();
    assert!(summary.starts_with("multiplier,seed,success_rate,env_reward_mean,cost_mean,deviation_mean\n"));
    assert_eq!(summary.lines().count(), 3);
    assert!(dir.path().join("sweep/lagrange_m1_seed4.csv").is_file());
    assert!(run_lagrange_sweep(&config, &[], &ThreadedRunner::new(1)).is_err());
    config.constraint = None;
    assert!(run_lagrange_sweep(&config, &[0.0], &ThreadedRunner::new(1)).is_err());
}
