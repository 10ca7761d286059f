//! Run configuration: a JSON document naming a preset, whose fields are
//! deep-merged over that preset's defaults and then validated as a whole.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{chart_warmup, window_count, SplitRatios, WindowSpec};
use crate::error::{Error, Result};
use crate::gbm::GbmParams;
use crate::labeler::{StrategyKind, StrategySpec};
use crate::nn::{ArchPreset, ArchitectureSpec};
use crate::raster::{ChartSpec, Scaling, SeriesRole};
use crate::trainer::{training_windows_per_region, LrSchedule, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Experiment1,
    Experiment2,
    Experiment3,
    Workflow1,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Experiment1, Preset::Experiment2, Preset::Experiment3, Preset::Workflow1];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Experiment1 => "experiment1",
            Preset::Experiment2 => "experiment2",
            Preset::Experiment3 => "experiment3",
            Preset::Workflow1 => "workflow1",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(vec![format!("preset: unknown preset {s:?}")]))
    }
}

/// Where price paths come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_paths: usize,
    /// Trading days per path.
    pub n_days: usize,
    /// Simulate open prices alongside closes.
    pub ohlc: bool,
    /// Price CSV to ingest instead of simulating; yields a single path.
    #[serde(default)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchPreset,
    pub filters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub balanced_epochs: bool,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub keep_best_val: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Report metrics on a class-balanced subsample of the test split (the
    /// full split is always reported as well).
    pub balanced_test: bool,
    /// Track validation on a class-balanced subsample of the validation split.
    pub balanced_val: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MovingWindowConfig {
    /// Days of history each step trains on.
    pub region: usize,
    #[serde(default)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub gbm: GbmParams,
    pub data: DataConfig,
    /// Moving averages computed for every path.
    pub indicators: Vec<usize>,
    pub window: WindowSpec,
    pub strategy: StrategySpec,
    pub chart: ChartSpec,
    pub splits: SplitRatios,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
    #[serde(default)]
    pub moving_window: Option<MovingWindowConfig>,
}

fn strategy(kind: StrategyKind, window: usize, holding: usize, buy_th: f64, sell_th: f64) -> StrategySpec {
    StrategySpec { kind, window, holding, buy_th, sell_th, ma_fast: 5, ma_mid: 7, ma_slow: 10 }
}

/// Experiment charts are drawn straight onto a 48x32 canvas.
fn small_chart(series: Vec<SeriesRole>) -> ChartSpec {
    ChartSpec { width: 48, height: 32, series, scaling: Scaling::JointMinmax, ..ChartSpec::default() }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        use SeriesRole::*;
        let experiment = |n_days, ohlc, indicators: Vec<usize>, window: WindowSpec, strategy, chart, epochs| RunConfig {
            preset,
            seed: 2024,
            out: None,
            gbm: GbmParams::default(),
            data: DataConfig { n_paths: 100, n_days, ohlc, csv: None },
            indicators,
            window,
            strategy,
            chart,
            splits: SplitRatios::default(),
            model: ModelConfig { arch: ArchPreset::MiniAlex, filters: 8 },
            train: TrainSection { epochs, batch_size: 32, learning_rate: 0.05, balanced_epochs: true, lr_schedule: LrSchedule::Constant, keep_best_val: true },
            eval: EvalConfig { balanced_test: true, balanced_val: true },
            moving_window: None,
        };
        match preset {
            Preset::Experiment1 => experiment(
                90,
                false,
                vec![5, 10, 20],
                WindowSpec { length: 20, holding: 5, stride: 1 },
                strategy(StrategyKind::PriceThreshold, 20, 5, 0.01, 0.01),
                small_chart(vec![Ma(20), Ma(10), Ma(5), Price]),
                100,
            ),
            Preset::Experiment2 => {
                let mut chart = small_chart(vec![Ma(10), Ma(7), Ma(5), Price]);
                chart.colors.insert(Ma(7), [0, 255, 0]);
                experiment(
                    90,
                    false,
                    vec![5, 7, 10],
                    WindowSpec { length: 20, holding: 3, stride: 1 },
                    strategy(StrategyKind::MaAlignment, 20, 3, 0.01, 0.01),
                    chart,
                    100,
                )
            }
            Preset::Experiment3 => {
                let mut s = strategy(StrategyKind::OpenCloseGap, 15, 5, 0.02, 0.01);
                (s.ma_fast, s.ma_mid, s.ma_slow) = (5, 10, 20);
                experiment(
                    90,
                    true,
                    vec![5, 10, 20],
                    WindowSpec { length: 15, holding: 5, stride: 1 },
                    s,
                    small_chart(vec![Ma(20), Ma(10), Ma(5), Open, Close]),
                    30,
                )
            }
            Preset::Workflow1 => RunConfig {
                preset,
                seed: 2024,
                out: None,
                gbm: GbmParams::default(),
                // Two trading years plus MA warm-up.
                data: DataConfig { n_paths: 1, n_days: 2 * 252 + 20, ohlc: false, csv: None },
                indicators: vec![5, 10, 20],
                window: WindowSpec { length: 5, holding: 1, stride: 1 },
                strategy: strategy(StrategyKind::NextDay, 5, 1, 0.01, 0.01),
                chart: small_chart(vec![Ma(20), Ma(10), Ma(5), Price]),
                splits: SplitRatios { train: 1.0, val: 0.0, test: 0.0 },
                model: ModelConfig { arch: ArchPreset::A1, filters: 5 },
                train: TrainSection { epochs: 30, batch_size: 16, learning_rate: 0.01, balanced_epochs: false, lr_schedule: LrSchedule::Constant, keep_best_val: false },
                eval: EvalConfig { balanced_test: false, balanced_val: false },
                moving_window: Some(MovingWindowConfig { region: 20, max_steps: Some(100) }),
            },
        }
    }

    /// Parses a JSON document: its `preset` picks the defaults, the rest of
    /// the document overrides them field by field, and the result is validated.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("not valid JSON: {e}")]))?;
        let Value::Object(map) = &user else {
            return Err(Error::Config(vec!["configuration must be a JSON object".into()]));
        };
        let preset = match map.get("preset") {
            Some(Value::String(s)) => s.parse::<Preset>()?,
            Some(other) => return Err(Error::Config(vec![format!("preset: expected a string, got {other}")])),
            None => return Err(Error::Config(vec!["preset: missing".into()])),
        };
        let mut merged = serde_json::to_value(RunConfig::preset(preset))?;
        merge(&mut merged, user);
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            seed: self.seed,
            balanced_epochs: self.train.balanced_epochs,
            lr_schedule: self.train.lr_schedule,
            keep_best_val: self.train.keep_best_val,
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.chart.channels, self.chart.height, self.chart.width]
    }

    pub fn architecture(&self) -> Result<ArchitectureSpec> {
        self.model.arch.build(self.input_shape(), self.model.filters)
    }

    /// Days in each simulated path; unknown until an ingested CSV is read.
    fn path_len(&self) -> Option<usize> {
        self.data.csv.is_none().then_some(self.data.n_days)
    }

    /// Checks every section and cross-section constraint, reporting all
    /// violations together.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let mut check = |field: &str, r: Result<()>| {
            if let Err(e) = r {
                bad.push(format!("{field}: {}", strip_prefix(&e)));
            }
        };
        check("gbm", self.gbm.validate());
        check("window", self.window.validate());
        check("strategy", self.strategy.validate());
        check("chart", self.chart.validate());
        check("splits", self.splits.validate());
        check("train", self.train_config().validate());
        if self.model.filters == 0 {
            bad.push("model.filters: must be >= 1".into());
        } else if self.chart.validate().is_ok() {
            if let Err(e) = self.architecture() {
                bad.push(format!("model: {}", strip_prefix(&e)));
            }
        }
        if self.data.csv.is_none() {
            if self.data.n_paths == 0 {
                bad.push("data.n_paths: must be >= 1".into());
            }
            if self.data.n_days < 2 {
                bad.push("data.n_days: must be >= 2".into());
            }
        }
        if self.indicators.iter().any(|&k| k == 0) {
            bad.push("indicators: moving-average windows must be >= 1".into());
        }
        for k in self.chart.ma_windows() {
            if !self.indicators.contains(&k) {
                bad.push(format!("chart.series: ma{k} is drawn but not listed in indicators"));
            }
        }
        if self.strategy.kind == StrategyKind::MaAlignment {
            for k in self.strategy.required_mas() {
                if !self.indicators.contains(&k) {
                    bad.push(format!("strategy: ma{k} is required but not listed in indicators"));
                }
            }
        }
        if self.strategy.window != self.window.length {
            bad.push(format!(
                "strategy.window: {} differs from window.length {}",
                self.strategy.window, self.window.length
            ));
        }
        if self.strategy.horizon() != self.window.holding {
            bad.push(format!(
                "strategy.holding: horizon {} differs from window.holding {}",
                self.strategy.horizon(),
                self.window.holding
            ));
        }
        let wants_open =
            self.strategy.kind == StrategyKind::OpenCloseGap || self.chart.series.contains(&SeriesRole::Open);
        if wants_open && self.data.csv.is_none() && !self.data.ohlc {
            bad.push("data.ohlc: open prices are needed by the strategy or chart but not simulated".into());
        }
        if let (Some(len), Ok(())) = (self.path_len(), self.window.validate()) {
            let warmup = chart_warmup(&self.chart).max(self.strategy_warmup());
            if window_count(len, self.window.length, self.window.holding, self.window.stride, warmup) == 0 {
                bad.push(format!(
                    "data.n_days: {len} days hold no {}-day window with holding {} after {warmup} warm-up days",
                    self.window.length, self.window.holding
                ));
            }
        }
        match (self.preset, &self.moving_window) {
            (Preset::Workflow1, None) => bad.push("moving_window: required by the workflow1 preset".into()),
            (Preset::Workflow1, Some(mw)) => {
                if self.window.validate().is_ok() && training_windows_per_region(mw.region, &self.window) == 0 {
                    bad.push(format!("moving_window.region: {} days hold no labelled training window", mw.region));
                }
                if mw.max_steps == Some(0) {
                    bad.push("moving_window.max_steps: must be >= 1".into());
                }
                if self.window.stride != 1 {
                    bad.push("window.stride: moving-window runs need stride 1".into());
                }
                if self.data.csv.is_none() && self.data.n_paths != 1 {
                    bad.push("data.n_paths: moving-window runs use exactly one path".into());
                }
            }
            (_, _) => {
                if self.splits.train <= 0.0 {
                    bad.push("splits.train: must be > 0".into());
                }
                if self.splits.test <= 0.0 {
                    bad.push("splits.test: must be > 0".into());
                }
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    /// Leading days before the labelling rule's moving averages exist.
    fn strategy_warmup(&self) -> usize {
        match self.strategy.kind {
            StrategyKind::MaAlignment => self.strategy.required_mas().into_iter().max().map_or(0, |k| k - 1),
            _ => 0,
        }
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Parameter(m) | Error::Architecture(m) => m.clone(),
        Error::Config(v) => v.join("; "),
        other => other.to_string(),
    }
}

/// Objects merge key by key; anything else replaces the base value.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in Preset::ALL {
            RunConfig::preset(p).validate().unwrap_or_else(|e| panic!("{p}: {e}"));
        }
    }

    #[test]
    fn override_merges_deeply() {
        let cfg = RunConfig::from_json(r#"{"preset": "experiment2", "gbm": {"sigma": 0.3}, "train": {"epochs": 5}}"#)
            .unwrap();
        assert_eq!(cfg.gbm.sigma, 0.3);
        assert_eq!(cfg.gbm.r, 0.01);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.learning_rate, 0.05);
        assert_eq!(cfg.strategy.kind, StrategyKind::MaAlignment);
    }

    #[test]
    fn lists_every_violation() {
        let err = RunConfig::from_json(
            r#"{"preset": "experiment2", "gbm": {"sigma": -1}, "train": {"epochs": 0}, "indicators": [5, 7]}"#,
        )
        .unwrap_err();
        let Error::Config(list) = err else { panic!("expected config error") };
        assert!(list.iter().any(|m| m.starts_with("gbm")), "{list:?}");
        assert!(list.iter().any(|m| m.starts_with("train")), "{list:?}");
        assert!(list.iter().any(|m| m.contains("ma10")), "{list:?}");
    }

    #[test]
    fn rejects_unknown_fields_and_presets() {
        assert!(matches!(RunConfig::from_json(r#"{"preset": "experiment9"}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"preset": "workflow1", "bogus": 1}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"gbm": {}}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json("[1, 2]"), Err(Error::Config(_))));
        assert_eq!(RunConfig::from_json("{").unwrap_err().exit_code(), 2);
    }

    #[test]
    fn open_lines_need_ohlc() {
        let err = RunConfig::from_json(r#"{"preset": "experiment3", "data": {"ohlc": false}}"#).unwrap_err();
        assert!(err.to_string().contains("data.ohlc"));
    }
}
