//! Sliding chart windows over price paths, their labels, splits, and the
//! on-disk dataset layout (`images/*.png` plus `manifest.csv`).

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbm::PricePath;
use crate::labeler::{label_window, Label, StrategySpec};
use crate::raster::{load_image, render_chart, save_image, ChartImage, ChartSpec, SeriesRole};
use crate::rng::seeded_rng;
use crate::series::IndicatorSet;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const IMAGES_DIR: &str = "images";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    /// Days per chart.
    pub length: usize,
    /// Days between the chart's last day and the labelling day.
    pub holding: usize,
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length < 2 || self.holding < 1 || self.stride < 1 {
            return Err(Error::Parameter(format!(
                "window spec needs length >= 2, holding >= 1, stride >= 1; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Number of windows of `length` days, stepping by `stride`, that fit in a
/// series of `len` days after `warmup` leading days while leaving `holding`
/// days after each window. `holding` may be 0 when only counting charts.
pub fn window_count(len: usize, length: usize, holding: usize, stride: usize, warmup: usize) -> usize {
    assert!(stride >= 1, "stride must be >= 1");
    match len.checked_sub(warmup + length + holding) {
        Some(slack) => slack / stride + 1,
        None => 0,
    }
}

/// One labelled chart and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: ChartImage,
    pub label: Label,
    pub path_id: usize,
    pub start: usize,
    pub end: usize,
}

impl LabeledSample {
    pub fn filename(&self) -> String {
        format!("{}_{}.png", self.path_id, self.start)
    }
}

/// Values of `role` over days `[start, end]`.
fn series_slice<'a>(
    path: &'a PricePath,
    indicators: &'a IndicatorSet,
    role: SeriesRole,
    start: usize,
    end: usize,
) -> Result<&'a [f64]> {
    match role {
        SeriesRole::Price | SeriesRole::Close => Ok(&path.close[start..=end]),
        SeriesRole::Open => path
            .open
            .as_ref()
            .map(|o| &o[start..=end])
            .ok_or_else(|| Error::Data("chart requests an open line but the path has no open prices".into())),
        SeriesRole::Ma(k) => indicators
            .get(k)
            .and_then(|s| s.slice(start, end))
            .ok_or_else(|| Error::Data(format!("MA{k} is not defined over days {start}..={end}"))),
    }
}

/// Renders the chart for days `[start, end]`.
pub fn render_window(
    path: &PricePath,
    indicators: &IndicatorSet,
    start: usize,
    end: usize,
    chart: &ChartSpec,
) -> Result<ChartImage> {
    let series = chart
        .series
        .iter()
        .map(|&role| Ok((role, series_slice(path, indicators, role, start, end)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut img = render_chart(&series, chart)?;
    img.window_span = (start, end);
    Ok(img)
}

/// Leading days skipped so every rendered moving average is defined.
pub fn chart_warmup(chart: &ChartSpec) -> usize {
    chart.ma_windows().into_iter().max().map_or(0, |k| k - 1)
}

/// Slides windows over one path and labels each at its last day.
pub fn build_samples(
    path: &PricePath,
    path_id: usize,
    indicators: &IndicatorSet,
    wspec: &WindowSpec,
    strategy: &StrategySpec,
    chart: &ChartSpec,
) -> Result<Vec<LabeledSample>> {
    wspec.validate()?;
    strategy.validate()?;
    if strategy.window != wspec.length || strategy.horizon() != wspec.holding {
        return Err(Error::Parameter(format!(
            "strategy window/horizon ({}, {}) disagree with window spec ({}, {})",
            strategy.window,
            strategy.horizon(),
            wspec.length,
            wspec.holding
        )));
    }
    let warmup = chart_warmup(chart);
    let count = window_count(path.len(), wspec.length, wspec.holding, wspec.stride, warmup);
    if count == 0 {
        return Err(Error::InsufficientData(format!(
            "path of {} days is too short for warm-up {warmup}, window {} and holding {}",
            path.len(),
            wspec.length,
            wspec.holding
        )));
    }
    (0..count)
        .into_par_iter()
        .map(|i| {
            let start = warmup + i * wspec.stride;
            let end = start + wspec.length - 1;
            Ok(LabeledSample {
                image: render_window(path, indicators, start, end, chart)?,
                label: label_window(path, indicators, end, strategy)?,
                path_id,
                start,
                end,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
    /// Samples not assigned to a split (moving-window runs).
    All,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
            SplitName::All => "all",
        })
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            "all" => Ok(SplitName::All),
            _ => Err(Error::Data(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.5,
            val: 0.25,
            test: 0.25,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Parameter(format!("split ratios must be >= 0: {self:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!("split ratios must sum to 1: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle followed by contiguous train/val/test cuts.
pub fn split_dataset<T>(samples: Vec<T>, ratios: SplitRatios, seed: u64) -> Result<Splits<T>> {
    ratios.validate()?;
    if samples.is_empty() {
        return Err(Error::InsufficientData("cannot split an empty dataset".into()));
    }
    let n = samples.len();
    let n_train = ((n as f64 * ratios.train).round() as usize).min(n);
    let n_val = ((n as f64 * ratios.val).round() as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed));
    let mut slots: Vec<Option<T>> = samples.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<T> { idx.iter().map(|&i| slots[i].take().unwrap()).collect() };
    Ok(Splits {
        train: take(&order[..n_train]),
        val: take(&order[n_train..n_train + n_val]),
        test: take(&order[n_train + n_val..]),
    })
}

/// Subsamples every class present down to the rarest present class's count,
/// keeping the survivors in their original order.
pub fn balance_classes<T>(samples: Vec<T>, label_of: impl Fn(&T) -> Label, seed: u64) -> Vec<T> {
    let mut groups: [Vec<usize>; 3] = Default::default();
    for (i, s) in samples.iter().enumerate() {
        groups[label_of(s).class_index()].push(i);
    }
    let Some(keep) = groups.iter().map(Vec::len).filter(|&n| n > 0).min() else {
        return samples;
    };
    let mut rng = seeded_rng(seed);
    let mut kept = Vec::with_capacity(keep * 3);
    for g in groups.iter_mut() {
        g.shuffle(&mut rng);
        kept.extend_from_slice(&g[..keep.min(g.len())]);
    }
    kept.sort_unstable();
    let mut it = kept.into_iter().peekable();
    samples
        .into_iter()
        .enumerate()
        .filter_map(|(i, s)| {
            if it.peek() == Some(&i) {
                it.next();
                Some(s)
            } else {
                None
            }
        })
        .collect()
}

/// Per-class sample counts in (sell, hold, buy) order.
pub fn class_counts<'a>(labels: impl IntoIterator<Item = &'a Label>) -> [usize; 3] {
    let mut counts = [0; 3];
    for l in labels {
        counts[l.class_index()] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub filename: String,
    pub label: i8,
    pub path_id: usize,
    pub start: usize,
    pub end: usize,
    pub split: SplitName,
}

pub type TaggedSample = (SplitName, LabeledSample);

/// Saves every image as `images/{path_id}_{start}.png` and writes `manifest.csv`.
pub fn write_manifest(samples: &[TaggedSample], dir: &Path) -> Result<()> {
    let images = dir.join(IMAGES_DIR);
    fs::create_dir_all(&images)?;
    samples
        .par_iter()
        .try_for_each(|(_, s)| save_image(&s.image, &images.join(s.filename())))?;
    let mut w = csv::Writer::from_path(dir.join(MANIFEST_FILE))?;
    for (split, s) in samples {
        w.serialize(ManifestRow {
            filename: s.filename(),
            label: s.label.value(),
            path_id: s.path_id,
            start: s.start,
            end: s.end,
            split: *split,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest_rows(dir: &Path) -> Result<Vec<ManifestRow>> {
    let manifest = dir.join(MANIFEST_FILE);
    if !manifest.exists() {
        return Err(Error::Dependency(manifest));
    }
    let mut rdr = csv::Reader::from_path(&manifest)?;
    let rows = rdr.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
    Ok(rows)
}

/// Reads `manifest.csv` and loads every referenced image.
pub fn read_manifest(dir: &Path) -> Result<Vec<TaggedSample>> {
    let rows = read_manifest_rows(dir)?;
    let images = dir.join(IMAGES_DIR);
    rows.into_par_iter()
        .map(|row| {
            let file = images.join(&row.filename);
            if !file.exists() {
                return Err(Error::Consistency(format!(
                    "manifest references missing image {}",
                    row.filename
                )));
            }
            let mut image = load_image(&file)?;
            image.window_span = (row.start, row.end);
            Ok((
                row.split,
                LabeledSample {
                    image,
                    label: Label::from_value(row.label)?,
                    path_id: row.path_id,
                    start: row.start,
                    end: row.end,
                },
            ))
        })
        .collect()
}
