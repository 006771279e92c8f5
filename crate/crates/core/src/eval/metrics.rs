//! Point, probabilistic and event metrics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::GaussianForecast;

/// Truths with magnitude below this (°F) are left out of MAPE and sMAPE.
pub const MAPE_GUARD: f64 = 1.0;

/// Default seasonal period in hours.
pub const SEASON: usize = 24;

/// Freeze threshold in °F.
pub const FREEZE_F: f64 = 32.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub mse: f64,
    pub mae: f64,
    /// `None` when every truth fell under the guard.
    pub mape: Option<f64>,
    pub smape: Option<f64>,
    /// Points left out of MAPE and sMAPE by the guard.
    pub excluded: usize,
}

fn aligned(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Metric(format!(
            "length mismatch: {} predictions, {} truths",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Metric("empty series".into()));
    }
    Ok(())
}

pub fn metrics_point(pred: &[f64], truth: &[f64]) -> Result<PointMetrics> {
    aligned(pred, truth)?;
    let n = pred.len() as f64;
    let (mut se, mut ae, mut ape, mut sape, mut kept) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for (p, y) in pred.iter().zip(truth) {
        let e = (p - y).abs();
        se += e * e;
        ae += e;
        if y.abs() < MAPE_GUARD {
            continue;
        }
        ape += e / y.abs();
        sape += 2.0 * e / (y.abs() + p.abs());
        kept += 1;
    }
    let pct = |s: f64| (kept > 0).then(|| 100.0 * s / kept as f64);
    Ok(PointMetrics {
        mse: se / n,
        mae: ae / n,
        mape: pct(ape),
        smape: pct(sape),
        excluded: pred.len() - kept,
    })
}

/// In-sample MAE of the seasonal-naive forecast `y_t = y_{t-period}`.
pub fn seasonal_scale(train: &[f64], period: usize) -> Result<f64> {
    if period == 0 || train.len() <= period {
        return Err(Error::Metric(format!(
            "MASE needs more than {period} training points, got {}",
            train.len()
        )));
    }
    let n = train.len() - period;
    let s = (period..train.len())
        .map(|t| (train[t] - train[t - period]).abs())
        .sum::<f64>()
        / n as f64;
    if s == 0.0 {
        return Err(Error::Metric("seasonal-naive scale is zero".into()));
    }
    Ok(s)
}

pub fn mase(pred: &[f64], truth: &[f64], train: &[f64], period: usize) -> Result<f64> {
    aligned(pred, truth)?;
    let scale = seasonal_scale(train, period)?;
    let mae = pred.iter().zip(truth).map(|(p, y)| (p - y).abs()).sum::<f64>() / pred.len() as f64;
    Ok(mae / scale)
}

fn std_normal() -> Normal {
    Normal::standard()
}

/// Closed-form CRPS of `N(mu, sigma²)` at `y`.
pub fn crps_gaussian(mu: f64, sigma: f64, y: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Metric(format!("sigma must be positive, got {sigma}")));
    }
    let n = std_normal();
    let z = (y - mu) / sigma;
    Ok(sigma * (z * (2.0 * n.cdf(z) - 1.0) + 2.0 * n.pdf(z) - 1.0 / std::f64::consts::PI.sqrt()))
}

/// Two-sided standard-normal quantile for a central interval.
pub fn interval_z(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Metric(format!("level must lie in (0, 1), got {level}")));
    }
    Ok(std_normal().inverse_cdf(0.5 + level / 2.0))
}

/// Fraction of truths inside `mu ± z σ`.
pub fn coverage(forecasts: &[GaussianForecast], truths: &[Vec<f64>], level: f64) -> Result<f64> {
    if forecasts.len() != truths.len() {
        return Err(Error::Metric("one truth series per forecast required".into()));
    }
    let z = interval_z(level)?;
    let (mut hit, mut n) = (0usize, 0usize);
    for (f, y) in forecasts.iter().zip(truths) {
        aligned(&f.mu, y)?;
        aligned(&f.sigma2, y)?;
        for ((m, v), t) in f.mu.iter().zip(&f.sigma2).zip(y) {
            hit += usize::from((t - m).abs() <= z * v.sqrt());
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Metric("no forecasts".into()));
    }
    Ok(hit as f64 / n as f64)
}

/// Gaussian negative log-likelihood of one point, including `½ ln 2π`.
pub fn nll_gaussian(mu: f64, sigma2: f64, y: f64) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::Metric(format!("variance must be positive, got {sigma2}")));
    }
    Ok(0.5 * ((2.0 * std::f64::consts::PI * sigma2).ln() + (y - mu).powi(2) / sigma2))
}

const MPS_TO_MPH: f64 = 3600.0 / 1609.344;

pub fn wind_speed_mph(u: f64, v: f64) -> f64 {
    u.hypot(v) * MPS_TO_MPH
}

/// F1 of hourly freeze detection, `< threshold` on both sides. Zero when
/// precision and recall are both zero.
pub fn freeze_f1(pred: &[f64], truth: &[f64], threshold: f64) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Metric("freeze_f1 needs aligned series".into()));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (p, y) in pred.iter().zip(truth) {
        match (*p < threshold, *y < threshold) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fneg) as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}
