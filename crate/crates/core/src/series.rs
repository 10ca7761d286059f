//! Moving-average indicator lines and CSV price ingestion.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::gbm::{calibrate_gbm, GbmParams, PricePath, TRADING_DAYS};

/// A sequence aligned to a source series but defined only from `start` on.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSeries {
    pub start: usize,
    pub values: Vec<f64>,
}

impl AlignedSeries {
    pub fn get(&self, t: usize) -> Option<f64> {
        t.checked_sub(self.start).and_then(|i| self.values.get(i).copied())
    }

    /// Total aligned length (defined and undefined indices).
    pub fn len(&self) -> usize {
        self.start + self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Defined values over `[from, to]`, or `None` if any index is undefined.
    pub fn slice(&self, from: usize, to: usize) -> Option<&[f64]> {
        if from < self.start || to >= self.len() || from > to {
            return None;
        }
        Some(&self.values[from - self.start..=to - self.start])
    }
}

/// Trailing `k`-day arithmetic mean. Index `t` is defined only for `t >= k - 1`.
pub fn moving_average(close: &[f64], k: usize) -> Result<AlignedSeries> {
    if k == 0 {
        return Err(Error::Parameter("moving-average window must be >= 1".into()));
    }
    if k > close.len() {
        return Err(Error::InsufficientData(format!(
            "moving-average window {k} exceeds series length {}",
            close.len()
        )));
    }
    // Clamping to the window range keeps rounding from pushing a mean
    // outside its window, and makes a constant window exact.
    let values = close
        .windows(k)
        .map(|w| {
            let (lo, hi) = w.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
            let mean = w.iter().sum::<f64>() / k as f64;
            if lo <= hi {
                mean.clamp(lo, hi)
            } else {
                mean
            }
        })
        .collect();
    Ok(AlignedSeries {
        start: k - 1,
        values,
    })
}

/// Moving averages for a set of window lengths over one path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IndicatorSet {
    pub ma: BTreeMap<usize, AlignedSeries>,
}

impl IndicatorSet {
    pub fn compute(close: &[f64], windows: &[usize]) -> Result<Self> {
        let mut ma = BTreeMap::new();
        for &k in windows {
            ma.insert(k, moving_average(close, k)?);
        }
        Ok(Self { ma })
    }

    pub fn get(&self, k: usize) -> Option<&AlignedSeries> {
        self.ma.get(&k)
    }

    /// Index of the first day on which every indicator is defined.
    pub fn warmup(&self) -> usize {
        self.ma.keys().max().map_or(0, |k| k - 1)
    }
}

/// Reads a daily price CSV with a required `close` column and an optional
/// `open` column. Other columns are ignored. Rows are 1-based in errors.
pub fn ingest_price_csv(reader: impl Read) -> Result<PricePath> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let close_col = find("close")
        .ok_or_else(|| Error::Data("CSV header has no `close` column".into()))?;
    let open_col = find("open");

    let mut close = Vec::new();
    let mut open = open_col.map(|_| Vec::new());
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        close.push(parse_price(&record, close_col, row, "close")?);
        if let (Some(col), Some(open)) = (open_col, open.as_mut()) {
            open.push(parse_price(&record, col, row, "open")?);
        }
    }
    if close.is_empty() {
        return Err(Error::InsufficientData("CSV has no data rows".into()));
    }
    let params = if close.len() >= 3 {
        calibrate_gbm(&close, 1.0 / TRADING_DAYS)?
    } else {
        GbmParams {
            r: 0.0,
            sigma: 0.0,
            dt: 1.0 / TRADING_DAYS,
            s0: close[0],
        }
    };
    Ok(PricePath {
        params,
        seed: 0,
        close,
        open,
    })
}

fn parse_price(record: &csv::StringRecord, col: usize, row: usize, name: &str) -> Result<f64> {
    let field = record.get(col).unwrap_or("");
    let value: f64 = field.parse().map_err(|_| Error::Parse {
        row,
        message: format!("cannot parse {name} value {field:?}"),
    })?;
    if !(value.is_finite() && value > 0.0) {
        return Err(Error::Data(format!("row {row}: {name} price must be positive, got {value}")));
    }
    Ok(value)
}

/// Writes a path in the format read by [`ingest_price_csv`], at full precision.
pub fn write_price_csv(path: &PricePath, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    match &path.open {
        Some(open) => {
            w.write_record(["open", "close"])?;
            for (o, c) in open.iter().zip(&path.close) {
                w.write_record([o.to_string(), c.to_string()])?;
            }
        }
        None => {
            w.write_record(["close"])?;
            for c in &path.close {
                w.write_record([c.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
