use std::fs;
use std::path::Path;

use fxchart::config::RunConfig;
use fxchart::dataset::{build_samples, WindowSpec};
use fxchart::gbm::{simulate_path, GbmParams, PricePath};
use fxchart::labeler::{Label, StrategySpec};
use fxchart::nn::{checkpoint, ArchPreset};
use fxchart::pipeline::*;
use fxchart::raster::ChartSpec;
use fxchart::series::IndicatorSet;
use fxchart::trainer::{evaluate, run_moving_window, train_model, ImageSet, TrainConfig};
use fxchart::Error;

const SMALL: &str = r#"{
    "preset": "experiment2",
    "seed": 11,
    "data": {"n_paths": 6, "n_days": 60},
    "model": {"filters": 2},
    "train": {"epochs": 3}
}"#;

fn small() -> RunConfig {
    RunConfig::from_json(SMALL).unwrap()
}

fn bytes(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

const ARTIFACTS: [&str; 5] = ["dataset/manifest.csv", "dataset/meta.json", HISTORY_FILE, REPORT_FILE, CHECKPOINT_FILE];

#[test]
fn full_run_writes_every_artifact_and_repeats_exactly() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_pipeline(&small(), Stage::All, a.path()).unwrap();
    run_pipeline(&small(), Stage::All, b.path()).unwrap();
    for name in ARTIFACTS.iter().chain(&[META_FILE, "paths/path_0.csv"]) {
        assert_eq!(bytes(a.path(), name), bytes(b.path(), name), "{name} differs");
    }
    let meta: serde_json::Value = serde_json::from_slice(&bytes(a.path(), META_FILE)).unwrap();
    assert_eq!(RunConfig::from_json(&meta["config"].to_string()).unwrap(), small());

    let history = read_history(a.path()).unwrap();
    let epochs: Vec<usize> = history.records.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, vec![1, 2, 3]);
    let report = Report::read(a.path()).unwrap();
    assert_eq!(report.evaluated_on, "test-balanced");
    assert_eq!(report.metrics.total, report.metrics.counts.iter().flatten().sum::<u64>());
    let per_class = report.metrics.counts.map(|row| row.iter().sum::<u64>());
    let present: Vec<u64> = per_class.into_iter().filter(|&n| n > 0).collect();
    assert!(present.iter().all(|&n| n == present[0]), "{per_class:?}");
    assert!(report.full_test.unwrap().total >= report.metrics.total);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let run = |threads: usize| {
        let dir = tempfile::tempdir().unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_pipeline(&small(), Stage::All, dir.path())).unwrap();
        ARTIFACTS.map(|n| bytes(dir.path(), n))
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn stages_rerun_in_isolation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    run_pipeline(&small(), Stage::All, out).unwrap();
    let before = ARTIFACTS.map(|n| bytes(out, n));
    fs::remove_dir_all(out.join(DATASET_DIR)).unwrap();
    for f in [HISTORY_FILE, REPORT_FILE, CHECKPOINT_FILE] {
        fs::remove_file(out.join(f)).unwrap();
    }
    for stage in [Stage::Dataset, Stage::Train, Stage::Eval] {
        run_pipeline(&small(), stage, out).unwrap();
    }
    assert_eq!(ARTIFACTS.map(|n| bytes(out, n)), before);
}

#[test]
fn missing_inputs_name_the_expected_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let expect = |stage: Stage, tail: &str| match run_pipeline(&small(), stage, out) {
        Err(e @ Error::Dependency(_)) => {
            assert!(e.to_string().contains(tail), "{e}");
            assert_eq!(e.exit_code(), 3);
        }
        other => panic!("{stage}: expected a dependency error, got {other:?}"),
    };
    expect(Stage::Dataset, "path_0.csv");
    expect(Stage::Train, "manifest.csv");
    expect(Stage::Eval, "checkpoint.bin");
    // meta.json is written even when a stage fails.
    assert!(out.join(META_FILE).exists());
}

#[test]
fn moving_window_preset_runs_through_the_pipeline() {
    let cfg = RunConfig::from_json(
        r#"{"preset": "workflow1", "seed": 3, "data": {"n_days": 80}, "train": {"epochs": 2},
            "moving_window": {"region": 20, "max_steps": 6}}"#,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&cfg, Stage::All, dir.path()).unwrap();
    let steps = read_predictions(dir.path()).unwrap();
    assert_eq!(steps.iter().map(|s| s.step).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());
    let report = Report::read(dir.path()).unwrap();
    assert_eq!(report.steps, Some(6));
    assert_eq!(report.metrics.total, 6);
    assert!(!dir.path().join(CHECKPOINT_FILE).exists());
}

#[test]
fn constant_prices_collapse_to_hold() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("flat.csv");
    fs::write(&csv, std::iter::once("close".to_string()).chain((0..80).map(|_| "110.5".into())).collect::<Vec<_>>().join("\n"))
        .unwrap();
    let text = format!(
        r#"{{"preset": "workflow1", "data": {{"csv": {:?}}}, "moving_window": {{"region": 20, "max_steps": 10}}}}"#,
        csv.to_str().unwrap()
    );
    let cfg = RunConfig::from_json(&text).unwrap();
    let out = dir.path().join("out");
    run_pipeline(&cfg, Stage::All, &out).unwrap();
    let steps = read_predictions(&out).unwrap();
    assert_eq!(steps.len(), 10);
    assert!(steps.iter().all(|s| s.truth == Label::Hold && s.degenerate));
    let report = Report::read(&out).unwrap();
    let hold_share = steps.iter().filter(|s| s.predicted == Label::Hold).count() as f64 / 10.0;
    assert_eq!(report.metrics.accuracy, hold_share);
    assert_eq!(report.degenerate_steps, Some(10));
}

#[test]
fn moving_window_never_looks_ahead() {
    let path = simulate_path(GbmParams { sigma: 0.6, ..GbmParams::default() }, 90, 21).unwrap();
    let chart = ChartSpec { width: 24, height: 16, series: vec![fxchart::raster::SeriesRole::Price], ..ChartSpec::default() };
    let wspec = WindowSpec { length: 5, holding: 1, stride: 1 };
    let strategy = StrategySpec { kind: fxchart::labeler::StrategyKind::NextDay, ..StrategySpec::price_threshold(5, 1, 0.01) };
    let arch = ArchPreset::A2.build([3, 16, 24], 2).unwrap();
    let cfg = TrainConfig { epochs: 3, batch_size: 8, seed: 5, ..TrainConfig::default() };
    let run = |p: &PricePath| {
        let ind = IndicatorSet::compute(&p.close, &[]).unwrap();
        run_moving_window(p, &ind, &wspec, 20, &strategy, &chart, &arch, &cfg, None).unwrap()
    };
    let full = run(&path);
    let cut = PricePath { close: path.close[..50].to_vec(), ..path.clone() };
    let short = run(&cut);
    assert!(short.steps.len() < full.steps.len());
    // Step s sees days up to s + region, its predicted day included.
    for (a, b) in short.steps.iter().zip(&full.steps) {
        assert_eq!(a, b);
    }
    assert_eq!(full.confusion.total(), full.steps.len() as u64);
}

#[test]
fn keep_best_returns_the_lowest_validation_loss_epoch() {
    let cfg = small();
    let paths: Vec<PricePath> = (0..4).map(|i| simulate_path(GbmParams::default(), 59, 40 + i).unwrap()).collect();
    let mut samples = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        let ind = IndicatorSet::compute(&p.close, &cfg.indicators).unwrap();
        samples.extend(build_samples(p, i, &ind, &cfg.window, &cfg.strategy, &cfg.chart).unwrap());
    }
    let (train, val) = samples.split_at(samples.len() / 2);
    let arch = cfg.architecture().unwrap();
    let train = ImageSet::from_samples(train, arch.input).unwrap();
    let val = ImageSet::from_samples(val, arch.input).unwrap();
    let tcfg = TrainConfig { epochs: 6, keep_best_val: true, ..cfg.train_config() };
    let (model, history) = train_model(&arch, &train, Some(&val), &tcfg).unwrap();
    let best = history.records.iter().map(|r| r.val_loss.unwrap()).fold(f64::INFINITY, f64::min);
    assert_eq!(evaluate(&model, &val).unwrap().0, best);

    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(&model, &dir.path().join("m.bin")).unwrap();
    assert_eq!(checkpoint::load(&dir.path().join("m.bin")).unwrap().params, model.params);
}
