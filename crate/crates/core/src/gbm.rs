//! Geometric Brownian motion price paths.
//!
//! Prices evolve in log space:
//! `ln S[t] = ln S[t-1] + (r - sigma^2 / 2) dt + sigma sqrt(dt) z[t]`
//! with i.i.d. standard normal `z[t]`, so every simulated price is positive.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream, NormalSource, PolarNormal};

/// Trading days per year; the default step is one trading day.
pub const TRADING_DAYS: f64 = 252.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbmParams {
    /// Annualized drift.
    pub r: f64,
    /// Annualized volatility.
    pub sigma: f64,
    /// Step length in years.
    pub dt: f64,
    /// Initial price.
    pub s0: f64,
}

impl Default for GbmParams {
    fn default() -> Self {
        Self {
            r: 0.01,
            sigma: 0.25,
            dt: 1.0 / TRADING_DAYS,
            s0: 100.0,
        }
    }
}

impl GbmParams {
    pub fn validate(&self) -> Result<()> {
        if !self.r.is_finite() {
            return Err(Error::Parameter(format!("drift must be finite, got {}", self.r)));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::Parameter(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Parameter(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.s0.is_finite() && self.s0 > 0.0) {
            return Err(Error::Parameter(format!("s0 must be > 0, got {}", self.s0)));
        }
        Ok(())
    }

    /// Deterministic part of one log increment over a step of `dt`.
    fn log_drift(&self, dt: f64) -> f64 {
        (self.r - 0.5 * self.sigma * self.sigma) * dt
    }
}

/// A daily price series. `seed == 0` marks ingested (not simulated) data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricePath {
    pub params: GbmParams,
    pub seed: u64,
    pub close: Vec<f64>,
    pub open: Option<Vec<f64>>,
}

impl PricePath {
    pub fn len(&self) -> usize {
        self.close.len()
    }

    pub fn is_empty(&self) -> bool {
        self.close.is_empty()
    }
}

fn check_steps(n_steps: usize) -> Result<()> {
    if n_steps == 0 {
        return Err(Error::Parameter("n_steps must be >= 1".into()));
    }
    Ok(())
}

/// Simulates `n_steps` daily steps; the result holds `n_steps + 1` closes
/// starting with `s0`.
pub fn simulate_path(params: GbmParams, n_steps: usize, seed: u64) -> Result<PricePath> {
    simulate_path_with(params, n_steps, seed, &mut PolarNormal::from_seed(seed))
}

/// [`simulate_path`] with an explicit normal source.
pub fn simulate_path_with(
    params: GbmParams,
    n_steps: usize,
    seed: u64,
    normals: &mut impl NormalSource,
) -> Result<PricePath> {
    params.validate()?;
    check_steps(n_steps)?;
    let drift = params.log_drift(params.dt);
    let vol = params.sigma * params.dt.sqrt();
    let mut x = params.s0.ln();
    let mut close = Vec::with_capacity(n_steps + 1);
    close.push(params.s0);
    for _ in 0..n_steps {
        x += drift + vol * normals.next_normal();
        close.push(x.exp());
    }
    Ok(PricePath {
        params,
        seed,
        close,
        open: None,
    })
}

/// Simulates `n_steps` daily bars at half-day resolution. Starting from `s0`
/// at half-step 0, bar `t` opens at half-step `2t + 1` and closes at
/// half-step `2t + 2`; both sequences have length `n_steps`.
pub fn simulate_ohlc_path(params: GbmParams, n_steps: usize, seed: u64) -> Result<PricePath> {
    simulate_ohlc_path_with(params, n_steps, seed, &mut PolarNormal::from_seed(seed))
}

pub fn simulate_ohlc_path_with(
    params: GbmParams,
    n_steps: usize,
    seed: u64,
    normals: &mut impl NormalSource,
) -> Result<PricePath> {
    params.validate()?;
    check_steps(n_steps)?;
    let half = params.dt / 2.0;
    let drift = params.log_drift(half);
    let vol = params.sigma * half.sqrt();
    let mut x = params.s0.ln();
    let mut open = Vec::with_capacity(n_steps);
    let mut close = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        x += drift + vol * normals.next_normal();
        open.push(x.exp());
        x += drift + vol * normals.next_normal();
        close.push(x.exp());
    }
    Ok(PricePath {
        params,
        seed,
        close,
        open: Some(open),
    })
}

/// Simulates `n_paths` independent paths of `n_days` days each. Path `i`
/// uses seed `derive_seed(master_seed, GBM_PATH, i)`.
pub fn simulate_paths(
    params: GbmParams,
    n_paths: usize,
    n_days: usize,
    ohlc: bool,
    master_seed: u64,
) -> Result<Vec<PricePath>> {
    if n_days < 2 {
        return Err(Error::Parameter("n_days must be >= 2".into()));
    }
    (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(master_seed, stream::GBM_PATH, i as u64);
            if ohlc {
                simulate_ohlc_path(params, n_days, seed)
            } else {
                simulate_path(params, n_days - 1, seed)
            }
        })
        .collect()
}

/// Log returns `ln(p[t] / p[t-1])`.
pub fn log_returns(prices: &[f64]) -> Vec<f64> {
    prices.windows(2).map(|w| (w[1] / w[0]).ln()).collect()
}

/// Sample mean and unbiased sample variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

/// Moment-matches GBM parameters to a historical close series.
pub fn calibrate_gbm(close: &[f64], dt: f64) -> Result<GbmParams> {
    if close.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "calibration needs at least 3 prices, got {}",
            close.len()
        )));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Parameter(format!("dt must be > 0, got {dt}")));
    }
    if let Some((i, p)) = close.iter().enumerate().find(|(_, p)| !(p.is_finite() && **p > 0.0)) {
        return Err(Error::Data(format!("price at index {i} is not positive: {p}")));
    }
    let (mean, var) = mean_var(&log_returns(close));
    let sigma2 = var / dt;
    Ok(GbmParams {
        r: mean / dt + sigma2 / 2.0,
        sigma: sigma2.sqrt(),
        dt,
        s0: close[0],
    })
}
