//! Rule-based buy/sell/hold labels for chart windows.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbm::PricePath;
use crate::series::IndicatorSet;

/// Trading action. Serialized as -1 / 0 / +1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i8", into = "i8")]
pub enum Label {
    Sell,
    Hold,
    Buy,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Sell, Label::Hold, Label::Buy];

    pub fn value(self) -> i8 {
        match self {
            Label::Sell => -1,
            Label::Hold => 0,
            Label::Buy => 1,
        }
    }

    pub fn from_value(v: i8) -> Result<Self> {
        match v {
            -1 => Ok(Label::Sell),
            0 => Ok(Label::Hold),
            1 => Ok(Label::Buy),
            _ => Err(Error::Label(format!("label value {v} is not -1, 0 or 1"))),
        }
    }

    /// Class index used by the classifier: Sell 0, Hold 1, Buy 2.
    pub fn class_index(self) -> usize {
        (self.value() + 1) as usize
    }

    pub fn from_class_index(i: usize) -> Result<Self> {
        Label::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Label(format!("class index {i} out of range")))
    }
}

impl TryFrom<i8> for Label {
    type Error = Error;

    fn try_from(v: i8) -> Result<Self> {
        Label::from_value(v)
    }
}

impl From<Label> for i8 {
    fn from(l: Label) -> i8 {
        l.value()
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Sell => "sell",
            Label::Hold => "hold",
            Label::Buy => "buy",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    /// Price threshold with a one-day horizon.
    NextDay,
    /// `close[end + H]` against `close[end]`.
    PriceThreshold,
    /// Fast/mid/slow moving averages all aligned on day `end + H`.
    MaAlignment,
    /// `open[end + H]` against `close[end]`.
    OpenCloseGap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    /// Chart window length in days.
    pub window: usize,
    /// Holding days between the window's last day and the labelling day.
    pub holding: usize,
    pub buy_th: f64,
    pub sell_th: f64,
    #[serde(default = "default_fast")]
    pub ma_fast: usize,
    #[serde(default = "default_mid")]
    pub ma_mid: usize,
    #[serde(default = "default_slow")]
    pub ma_slow: usize,
}

fn default_fast() -> usize {
    5
}
fn default_mid() -> usize {
    7
}
fn default_slow() -> usize {
    10
}

impl StrategySpec {
    pub fn price_threshold(window: usize, holding: usize, th: f64) -> Self {
        Self {
            kind: StrategyKind::PriceThreshold,
            window,
            holding,
            buy_th: th,
            sell_th: th,
            ma_fast: default_fast(),
            ma_mid: default_mid(),
            ma_slow: default_slow(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.window < 2 {
            problems.push(format!("strategy window must be >= 2, got {}", self.window));
        }
        if self.holding < 1 {
            problems.push("holding days must be >= 1".to_string());
        }
        if !(self.buy_th > 0.0 && self.buy_th.is_finite()) {
            problems.push(format!("buy threshold must be > 0, got {}", self.buy_th));
        }
        if !(self.sell_th > 0.0 && self.sell_th < 1.0) {
            problems.push(format!("sell threshold must be in (0, 1), got {}", self.sell_th));
        }
        if self.kind == StrategyKind::MaAlignment
            && (self.ma_fast == 0 || self.ma_mid == 0 || self.ma_slow == 0)
        {
            problems.push("moving-average windows must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Parameter(problems.join("; ")))
        }
    }

    /// Days from the window end to the day the rule looks at.
    pub fn horizon(&self) -> usize {
        match self.kind {
            StrategyKind::NextDay => 1,
            _ => self.holding,
        }
    }

    /// Moving averages the rule reads.
    pub fn required_mas(&self) -> Vec<usize> {
        match self.kind {
            StrategyKind::MaAlignment => vec![self.ma_fast, self.ma_mid, self.ma_slow],
            _ => Vec::new(),
        }
    }

    fn classify(&self, reference: f64, future: f64) -> Label {
        if future >= reference * (1.0 + self.buy_th) {
            Label::Buy
        } else if future <= reference * (1.0 - self.sell_th) {
            Label::Sell
        } else {
            Label::Hold
        }
    }
}

/// Labels the window ending on day `end`. Threshold comparisons are inclusive
/// and multiplicative (`a >= b * (1 + th)`).
pub fn label_window(
    path: &PricePath,
    indicators: &IndicatorSet,
    end: usize,
    spec: &StrategySpec,
) -> Result<Label> {
    let day = end + spec.horizon();
    if day >= path.len() {
        return Err(Error::OutOfRange(format!(
            "window end {end} plus horizon {} is beyond the path (length {})",
            spec.horizon(),
            path.len()
        )));
    }
    match spec.kind {
        StrategyKind::NextDay | StrategyKind::PriceThreshold => {
            Ok(spec.classify(path.close[end], path.close[day]))
        }
        StrategyKind::OpenCloseGap => {
            let open = path
                .open
                .as_ref()
                .ok_or_else(|| Error::Data("open-close-gap strategy needs open prices".into()))?;
            Ok(spec.classify(path.close[end], open[day]))
        }
        StrategyKind::MaAlignment => {
            let ma = |k: usize| {
                indicators
                    .get(k)
                    .and_then(|s| s.get(day))
                    .ok_or_else(|| Error::Data(format!("MA{k} is not defined on day {day}")))
            };
            let (fast, mid, slow) = (ma(spec.ma_fast)?, ma(spec.ma_mid)?, ma(spec.ma_slow)?);
            let up = 1.0 + spec.buy_th;
            let down = 1.0 - spec.sell_th;
            if fast >= mid * up && mid >= slow * up {
                Ok(Label::Buy)
            } else if fast <= mid * down && mid <= slow * down {
                Ok(Label::Sell)
            } else {
                Ok(Label::Hold)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gbm::GbmParams;
    use crate::series::AlignedSeries;

    fn path(close: Vec<f64>, open: Option<Vec<f64>>) -> PricePath {
        PricePath {
            params: GbmParams::default(),
            seed: 0,
            close,
            open,
        }
    }

    fn with_future(now: f64, later: f64, h: usize) -> PricePath {
        let mut close = vec![now; h + 1];
        close[h] = later;
        path(close, None)
    }

    #[test]
    fn label_mapping() {
        for (i, l) in Label::ALL.iter().enumerate() {
            assert_eq!(l.class_index(), i);
            assert_eq!(Label::from_class_index(i).unwrap(), *l);
            assert_eq!(Label::from_value(l.value()).unwrap(), *l);
        }
        assert!(Label::from_value(2).is_err());
        assert!(Label::from_class_index(3).is_err());
    }

    #[test]
    fn price_threshold_cases() {
        let spec = StrategySpec::price_threshold(20, 5, 0.01);
        let none = IndicatorSet::default();
        assert_eq!(label_window(&with_future(100.0, 101.5, 5), &none, 0, &spec).unwrap(), Label::Buy);
        assert_eq!(label_window(&with_future(100.0, 100.0, 5), &none, 0, &spec).unwrap(), Label::Hold);
        assert_eq!(label_window(&with_future(100.0, 98.0, 5), &none, 0, &spec).unwrap(), Label::Sell);
    }

    #[test]
    fn threshold_is_inclusive() {
        // thresholds chosen so the products are exact in binary
        let mut spec = StrategySpec::price_threshold(20, 1, 0.5);
        spec.sell_th = 0.25;
        let none = IndicatorSet::default();
        assert_eq!(label_window(&with_future(8.0, 12.0, 1), &none, 0, &spec).unwrap(), Label::Buy);
        assert_eq!(label_window(&with_future(8.0, 6.0, 1), &none, 0, &spec).unwrap(), Label::Sell);
        assert_eq!(label_window(&with_future(8.0, 11.9, 1), &none, 0, &spec).unwrap(), Label::Hold);
    }

    #[test]
    fn next_day_forces_one_day_horizon() {
        let mut spec = StrategySpec::price_threshold(5, 9, 0.01);
        spec.kind = StrategyKind::NextDay;
        let p = path(vec![100.0, 102.0, 50.0], None);
        assert_eq!(label_window(&p, &IndicatorSet::default(), 0, &spec).unwrap(), Label::Buy);
    }

    #[test]
    fn ma_alignment_buy() {
        let spec = StrategySpec {
            kind: StrategyKind::MaAlignment,
            ..StrategySpec::price_threshold(5, 1, 0.01)
        };
        let at = |v: f64| AlignedSeries {
            start: 1,
            values: vec![v],
        };
        let mut ind = IndicatorSet::default();
        ind.ma.insert(5, at(102.0));
        ind.ma.insert(7, at(100.9));
        ind.ma.insert(10, at(99.8));
        let p = path(vec![100.0, 100.0], None);
        assert_eq!(label_window(&p, &ind, 0, &spec).unwrap(), Label::Buy);
        ind.ma.insert(5, at(97.0));
        ind.ma.insert(7, at(98.5));
        ind.ma.insert(10, at(99.8));
        assert_eq!(label_window(&p, &ind, 0, &spec).unwrap(), Label::Sell);
        ind.ma.insert(7, at(100.0));
        assert_eq!(label_window(&p, &ind, 0, &spec).unwrap(), Label::Hold);
        ind.ma.remove(&10);
        assert!(matches!(label_window(&p, &ind, 0, &spec), Err(Error::Data(_))));
    }

    #[test]
    fn open_close_gap_asymmetric() {
        let spec = StrategySpec {
            kind: StrategyKind::OpenCloseGap,
            buy_th: 0.02,
            sell_th: 0.01,
            ..StrategySpec::price_threshold(15, 5, 0.01)
        };
        let mut open = vec![100.0; 6];
        open[5] = 101.0;
        let p = path(vec![100.0; 6], Some(open.clone()));
        let none = IndicatorSet::default();
        assert_eq!(label_window(&p, &none, 0, &spec).unwrap(), Label::Hold);
        open[5] = 102.5;
        let p = path(vec![100.0; 6], Some(open.clone()));
        assert_eq!(label_window(&p, &none, 0, &spec).unwrap(), Label::Buy);
        open[5] = 98.9;
        let p = path(vec![100.0; 6], Some(open));
        assert_eq!(label_window(&p, &none, 0, &spec).unwrap(), Label::Sell);
        let no_open = path(vec![100.0; 6], None);
        assert!(matches!(label_window(&no_open, &none, 0, &spec), Err(Error::Data(_))));
    }

    #[test]
    fn horizon_beyond_end() {
        let spec = StrategySpec::price_threshold(5, 5, 0.01);
        let p = path(vec![1.0; 10], None);
        assert!(label_window(&p, &IndicatorSet::default(), 4, &spec).is_ok());
        assert!(matches!(
            label_window(&p, &IndicatorSet::default(), 5, &spec),
            Err(Error::OutOfRange(_))
        ));
    }

    #[test]
    fn spec_validation() {
        let mut s = StrategySpec::price_threshold(20, 5, 0.01);
        assert!(s.validate().is_ok());
        s.window = 1;
        s.holding = 0;
        s.buy_th = 0.0;
        let msg = s.validate().unwrap_err().to_string();
        assert!(msg.contains("window") && msg.contains("holding") && msg.contains("buy"));
    }
}
