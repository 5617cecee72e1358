use std::fs;
use std::path::Path;

use dda_core::augment::AugmentMethod;
use dda_core::data::{load_dataset, Format, TaskSpec};
use dda_core::experiment::{cell_checkpoint_path, results_path, run_pipeline, ExperimentConfig};
use dda_core::models::DownstreamModel;
use dda_core::stats::{aggregate_cells, bayesian_signed_rank, load_results, Arm};
use dda_core::training::evaluate_dataset;

fn small_config(out: &Path, methods: &str) -> ExperimentConfig {
    let text = format!(
        r#"{{
        "dataset": {{"name": "waves", "source": {{"synthetic": {{"n_train": 12, "n_val": 6, "n_test": 6, "spec": {{"len": 64}}}}}}}},
        "attributes": {{"hidden": [8], "train": {{"max_steps": 10, "eval_every": 5}}}},
        "denoiser": {{"widths": [4, 4], "time_embed_dim": 4, "train": {{"max_steps": 6, "eval_every": 3, "batch_size": 6}}}},
        "grid": {{"methods": {methods}, "noise_rates": [0.1, 0.3], "steps": [1, 2]}},
        "downstream": {{"model": {{"branch_channels": 2, "conv_channels": [4, 4], "fc": [8, 8]}},
                        "train": {{"max_steps": 6, "eval_every": 3, "batch_size": 6}}}},
        "repetitions": 2,
        "output_dir": {out:?},
        "master_seed": 17,
        "workers": 1,
        "record_timing": false
    }}"#
    );
    ExperimentConfig::from_json(&text).unwrap()
}

#[test]
fn raw_only_grid_trains_no_denoiser() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), r#"["raw"]"#);
    cfg.repetitions = 3;
    let out = run_pipeline(&cfg).unwrap();
    assert_eq!(out.records.len(), 3);
    assert!(out.denoisers.is_empty());
    assert!(!dir.path().join("attributes").exists());
    assert!(!dir.path().join("denoisers").exists());
    assert!(out.records.iter().all(|r| r.error.is_none() && r.net == "cnn"));
    let text = fs::read_to_string(results_path(dir.path())).unwrap();
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), r#"["raw", "noise", "dpm"]"#);
    run_pipeline(&cfg).unwrap();
    let first = fs::read(results_path(dir.path())).unwrap();
    fs::remove_dir_all(dir.path()).unwrap();
    let out = run_pipeline(&cfg).unwrap();
    let second = fs::read(results_path(dir.path())).unwrap();
    assert_eq!(first, second);
    // raw 2 reps, noise 2 rates x 2 reps, conditional dpm 2 rates x 2 steps x 2 reps
    assert_eq!(out.records.len(), 2 + 4 + 8);
    assert!(out.records.iter().all(|r| r.error.is_none()), "{:?}", out.records);
    let dpm = out.records.iter().find(|r| r.method == AugmentMethod::Dpm).unwrap();
    assert!(dpm.conditional && dpm.denoiser_checkpoint_hash.is_some());
    assert!(dir.path().join("attributes").join("predictor.ckpt").exists());
    assert_eq!(load_results(dir.path()).unwrap(), out.records);
}

#[test]
fn failing_denoiser_only_fails_its_cells() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), r#"["raw", "dae"]"#);
    cfg.grid.conditional = vec![false];
    // no downsampling stage fits: the denoiser cannot be built
    cfg.denoiser.widths = vec![];
    let out = run_pipeline(&cfg).unwrap();
    for r in &out.records {
        match r.method {
            AugmentMethod::Raw => assert!(r.test_loss.is_some() && r.error.is_none()),
            _ => assert!(r.test_loss.is_none() && r.error.is_some()),
        }
    }
}

#[test]
fn saved_models_reproduce_recorded_test_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), r#"["raw", "noise"]"#);
    let out = run_pipeline(&cfg).unwrap();
    let test = load_dataset(
        &dir.path().join("data").join("test.tsv"),
        Format::UcrTsv,
        TaskSpec::Classification { n_classes: None },
    )
    .unwrap();
    let cells = cfg.grid.cells(cfg.repetitions);
    for (cell, rec) in cells.iter().zip(&out.records) {
        let model = DownstreamModel::load(&cell_checkpoint_path(dir.path(), cell)).unwrap();
        let loss = evaluate_dataset(&model, &test).unwrap();
        assert!((loss - rec.test_loss.unwrap()).abs() < 1e-9);
    }
    let agg = aggregate_cells(dir.path(), Arm::parse("noise").unwrap(), Arm::parse("raw").unwrap()).unwrap();
    assert_eq!(agg.pairs.len(), 2);
    let res = bayesian_signed_rank(&agg.pairs, 0.05, 1000, 0).unwrap();
    assert_eq!(res.n_pairs, 2);
}
