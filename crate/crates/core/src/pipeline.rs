//! Stage runner. Every stage reads the previous stage's files under the
//! output directory, so stages can be rerun in isolation:
//!
//! ```text
//! out/meta.json              resolved config and seeds, written first
//! out/paths/path_{i}.csv     simulate
//! out/dataset/...            dataset (images/, manifest.csv, meta.json)
//! out/checkpoint.bin         train (experiments)
//! out/history.csv            train (experiments)
//! out/predictions.csv        train (moving-window runs)
//! out/report.json            eval
//! ```

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{Preset, RunConfig};
use crate::dataset::{
    balance_classes, build_samples, class_counts, read_manifest, split_dataset, write_manifest, LabeledSample,
    SplitName, TaggedSample, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::eval::{confusion, metrics_report, MetricsReport};
use crate::gbm::{simulate_paths, PricePath};
use crate::labeler::Label;
use crate::nn::checkpoint;
use crate::rng::{derive_seed, stream};
use crate::series::{ingest_price_csv, write_price_csv, IndicatorSet};
use crate::trainer::{moving_window_on_samples, predict, train_model, ImageSet, StepOutcome, TrainHistory};

pub const META_FILE: &str = "meta.json";
pub const PATHS_DIR: &str = "paths";
pub const DATASET_DIR: &str = "dataset";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Simulate,
    Dataset,
    Train,
    Eval,
    All,
}

impl Stage {
    const ORDER: [Stage; 4] = [Stage::Simulate, Stage::Dataset, Stage::Train, Stage::Eval];

    fn name(&self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Dataset => "dataset",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::All => "all",
        }
    }

    fn steps(self) -> Vec<Stage> {
        match self {
            Stage::All => Stage::ORDER.to_vec(),
            s => vec![s],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ORDER
            .into_iter()
            .chain([Stage::All])
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(vec![format!("stage: unknown stage {s:?}")]))
    }
}

/// Seeds handed to each randomized step, all derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub split: u64,
    pub balance_val: u64,
    pub balance_test: u64,
}

impl Seeds {
    pub fn from_master(master: u64) -> Self {
        Self {
            master,
            split: derive_seed(master, stream::SPLIT, 0),
            balance_val: derive_seed(master, stream::BALANCE, 1),
            balance_test: derive_seed(master, stream::BALANCE, 2),
        }
    }
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub preset: Preset,
    /// Which samples the headline metrics cover.
    pub evaluated_on: String,
    #[serde(flatten)]
    pub metrics: MetricsReport,
    /// Metrics over the whole test split when the headline uses a balanced subset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_test: Option<MetricsReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degenerate_steps: Option<usize>,
}

impl Report {
    pub fn read(out: &Path) -> Result<Self> {
        let file = require(out.join(REPORT_FILE))?;
        Ok(serde_json::from_reader(BufReader::new(File::open(file)?))?)
    }
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Dependency(path))
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn path_file(out: &Path, id: usize) -> PathBuf {
    out.join(PATHS_DIR).join(format!("path_{id}.csv"))
}

fn n_paths(cfg: &RunConfig) -> usize {
    if cfg.data.csv.is_some() {
        1
    } else {
        cfg.data.n_paths
    }
}

/// Runs `stage` (or every stage, in order) for `cfg` under `out`.
pub fn run_pipeline(cfg: &RunConfig, stage: Stage, out: &Path) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let seeds = Seeds::from_master(cfg.seed);
    write_json(
        &out.join(META_FILE),
        &json!({ "version": env!("CARGO_PKG_VERSION"), "config": cfg, "seeds": seeds }),
    )?;
    for step in stage.steps() {
        match step {
            Stage::Simulate => simulate_stage(cfg, out)?,
            Stage::Dataset => dataset_stage(cfg, &seeds, out)?,
            Stage::Train => train_stage(cfg, &seeds, out)?,
            Stage::Eval => eval_stage(cfg, &seeds, out)?,
            Stage::All => unreachable!("expanded above"),
        }
    }
    Ok(())
}

fn simulate_stage(cfg: &RunConfig, out: &Path) -> Result<()> {
    let paths = match &cfg.data.csv {
        Some(csv) => {
            let file = File::open(csv).map_err(|e| Error::Data(format!("cannot open {}: {e}", csv.display())))?;
            vec![ingest_price_csv(BufReader::new(file))?]
        }
        None => simulate_paths(cfg.gbm, cfg.data.n_paths, cfg.data.n_days, cfg.data.ohlc, cfg.seed)?,
    };
    let dir = out.join(PATHS_DIR);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    for (i, p) in paths.iter().enumerate() {
        let mut w = BufWriter::new(File::create(path_file(out, i))?);
        write_price_csv(p, &mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn read_path(out: &Path, id: usize) -> Result<PricePath> {
    let file = require(path_file(out, id))?;
    ingest_price_csv(BufReader::new(File::open(file)?))
}

fn dataset_stage(cfg: &RunConfig, seeds: &Seeds, out: &Path) -> Result<()> {
    let mut samples = Vec::new();
    for id in 0..n_paths(cfg) {
        let path = read_path(out, id)?;
        let ind = IndicatorSet::compute(&path.close, &cfg.indicators)?;
        samples.extend(build_samples(&path, id, &ind, &cfg.window, &cfg.strategy, &cfg.chart)?);
    }
    let tags: Vec<SplitName> = if cfg.preset == Preset::Workflow1 {
        vec![SplitName::All; samples.len()]
    } else {
        let split = split_dataset((0..samples.len()).collect(), cfg.splits, seeds.split)?;
        let mut tags = vec![SplitName::Train; samples.len()];
        for &i in &split.val {
            tags[i] = SplitName::Val;
        }
        for &i in &split.test {
            tags[i] = SplitName::Test;
        }
        tags
    };
    let tagged: Vec<TaggedSample> = tags.into_iter().zip(samples).collect();

    let dir = out.join(DATASET_DIR);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    write_manifest(&tagged, &dir)?;
    let counts = |want: Option<SplitName>| {
        class_counts(tagged.iter().filter(|(s, _)| want.map_or(true, |w| *s == w)).map(|(_, x)| &x.label))
    };
    write_json(
        &dir.join(META_FILE),
        &json!({
            "gbm": cfg.gbm,
            "data": cfg.data,
            "indicators": cfg.indicators,
            "window": cfg.window,
            "strategy": cfg.strategy,
            "chart": cfg.chart,
            "splits": cfg.splits,
            "seeds": { "paths": cfg.seed, "split": seeds.split },
            "class_order": ["sell", "hold", "buy"],
            "class_counts": {
                "all": counts(None),
                "train": counts(Some(SplitName::Train)),
                "val": counts(Some(SplitName::Val)),
                "test": counts(Some(SplitName::Test)),
            },
        }),
    )?;
    Ok(())
}

fn load_dataset(out: &Path) -> Result<Vec<TaggedSample>> {
    let dir = out.join(DATASET_DIR);
    require(dir.join(MANIFEST_FILE))?;
    read_manifest(&dir)
}

fn split_of(samples: &[TaggedSample], want: SplitName) -> Vec<LabeledSample> {
    samples.iter().filter(|(s, _)| *s == want).map(|(_, x)| x.clone()).collect()
}

fn train_stage(cfg: &RunConfig, seeds: &Seeds, out: &Path) -> Result<()> {
    let samples = load_dataset(out)?;
    let arch = cfg.architecture()?;
    let tcfg = cfg.train_config();
    if let Some(mw) = &cfg.moving_window {
        let all: Vec<LabeledSample> = samples.into_iter().map(|(_, s)| s).collect();
        let result = moving_window_on_samples(&all, &cfg.window, mw.region, &arch, &tcfg, mw.max_steps)?;
        let mut w = csv::Writer::from_path(out.join(PREDICTIONS_FILE))?;
        for step in &result.steps {
            w.serialize(step)?;
        }
        w.flush()?;
        return Ok(());
    }
    let train = split_of(&samples, SplitName::Train);
    let mut val = split_of(&samples, SplitName::Val);
    if cfg.eval.balanced_val {
        val = balance_classes(val, |s| s.label, seeds.balance_val);
    }
    let train_set = ImageSet::from_samples(&train, arch.input)?;
    let val_set = ImageSet::from_samples(&val, arch.input)?;
    let (model, history) = train_model(&arch, &train_set, Some(&val_set), &tcfg)?;
    checkpoint::save(&model, &out.join(CHECKPOINT_FILE))?;
    let mut w = BufWriter::new(File::create(out.join(HISTORY_FILE))?);
    history.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_history(out: &Path) -> Result<TrainHistory> {
    let file = require(out.join(HISTORY_FILE))?;
    TrainHistory::read_csv(BufReader::new(File::open(file)?))
}

pub fn read_predictions(out: &Path) -> Result<Vec<StepOutcome>> {
    let file = require(out.join(PREDICTIONS_FILE))?;
    let mut rdr = csv::Reader::from_path(file)?;
    let rows = rdr.deserialize().collect::<std::result::Result<Vec<StepOutcome>, _>>()?;
    Ok(rows)
}

fn eval_stage(cfg: &RunConfig, seeds: &Seeds, out: &Path) -> Result<()> {
    let report = if cfg.moving_window.is_some() {
        let steps = read_predictions(out)?;
        let preds: Vec<Label> = steps.iter().map(|s| s.predicted).collect();
        let truths: Vec<Label> = steps.iter().map(|s| s.truth).collect();
        Report {
            preset: cfg.preset,
            evaluated_on: "moving-window".into(),
            metrics: metrics_report(&confusion(&preds, &truths)?)?,
            full_test: None,
            steps: Some(steps.len()),
            degenerate_steps: Some(steps.iter().filter(|s| s.degenerate).count()),
        }
    } else {
        let model = checkpoint::load(&require(out.join(CHECKPOINT_FILE))?)?;
        let test = split_of(&load_dataset(out)?, SplitName::Test);
        let score = |samples: &[LabeledSample]| -> Result<MetricsReport> {
            let set = ImageSet::from_samples(samples, model.input_shape())?;
            let truths: Vec<Label> = samples.iter().map(|s| s.label).collect();
            metrics_report(&confusion(&predict(&model, &set)?, &truths)?)
        };
        let full = score(&test)?;
        if cfg.eval.balanced_test {
            let balanced = balance_classes(test, |s| s.label, seeds.balance_test);
            Report {
                preset: cfg.preset,
                evaluated_on: "test-balanced".into(),
                metrics: score(&balanced)?,
                full_test: Some(full),
                steps: None,
                degenerate_steps: None,
            }
        } else {
            Report {
                preset: cfg.preset,
                evaluated_on: "test".into(),
                metrics: full,
                full_test: None,
                steps: None,
                degenerate_steps: None,
            }
        }
    };
    write_json(&out.join(REPORT_FILE), &report)
}
