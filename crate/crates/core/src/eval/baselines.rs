//! Classical forecasters that see only the target's own context.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::metrics::SEASON;
use crate::error::{Error, Result};

/// Lag order of the autoregressive baseline.
pub const AR_ORDER: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    LastValue,
    MovingAverage,
    Persistence,
    SeasonalNaive,
    AutoReg,
}

impl Baseline {
    pub const ALL: [Baseline; 5] = [
        Baseline::LastValue,
        Baseline::MovingAverage,
        Baseline::Persistence,
        Baseline::SeasonalNaive,
        Baseline::AutoReg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::LastValue => "last_value",
            Baseline::MovingAverage => "moving_average",
            Baseline::Persistence => "persistence",
            Baseline::SeasonalNaive => "seasonal_naive",
            Baseline::AutoReg => "autoreg",
        }
    }

    /// Shortest context the baseline accepts.
    pub fn min_context(self) -> usize {
        match self {
            Baseline::LastValue => 1,
            Baseline::MovingAverage | Baseline::Persistence | Baseline::SeasonalNaive => SEASON,
            // At least as many equations as unknowns.
            Baseline::AutoReg => 2 * AR_ORDER + 1,
        }
    }

    pub fn forecast(self, context: &[f64], horizon: usize) -> Result<Vec<f64>> {
        if context.len() < self.min_context() {
            return Err(Error::Data(format!(
                "{} needs {} context hours, got {}",
                self.name(),
                self.min_context(),
                context.len()
            )));
        }
        let n = context.len();
        Ok(match self {
            Baseline::LastValue => vec![context[n - 1]; horizon],
            Baseline::MovingAverage => {
                vec![context[n - SEASON..].iter().sum::<f64>() / SEASON as f64; horizon]
            }
            Baseline::Persistence => (0..horizon).map(|h| context[n - SEASON + h % SEASON]).collect(),
            Baseline::SeasonalNaive => (0..horizon)
                .map(|h| {
                    // Same hour of the previous day; once that day lies in
                    // the horizon, the latest observed day stands in.
                    let back = SEASON * (h / SEASON + 1);
                    let t = n + h - back;
                    context[t]
                })
                .collect(),
            Baseline::AutoReg => ArModel::fit(context, AR_ORDER)?.iterate(context, horizon),
        })
    }
}

/// All baselines on one context; each entry fails independently.
pub fn baselines(context: &[f64], horizon: usize) -> Vec<(Baseline, Result<Vec<f64>>)> {
    Baseline::ALL
        .iter()
        .map(|b| (*b, b.forecast(context, horizon)))
        .collect()
}

/// `y_t = c + Σ_i coef[i] · y_{t-1-i}` fitted by least squares.
#[derive(Debug, Clone, PartialEq)]
pub struct ArModel {
    pub coef: Vec<f64>,
    pub intercept: f64,
}

impl ArModel {
    /// Minimum-norm least-squares fit, so rank-deficient histories such as
    /// a constant series still give a forecaster.
    pub fn fit(series: &[f64], order: usize) -> Result<Self> {
        if order == 0 || series.len() < 2 * order + 1 {
            return Err(Error::Data(format!(
                "AR({order}) needs at least {} points, got {}",
                2 * order + 1,
                series.len()
            )));
        }
        let rows = series.len() - order;
        let x = DMatrix::from_fn(rows, order + 1, |r, c| {
            if c == order {
                1.0
            } else {
                series[r + order - 1 - c]
            }
        });
        let y = DVector::from_fn(rows, |r, _| series[r + order]);
        let w = x
            .svd(true, true)
            .solve(&y, 1e-10)
            .map_err(|e| Error::Data(format!("AR fit failed: {e}")))?;
        Ok(Self {
            coef: w.rows(0, order).iter().copied().collect(),
            intercept: w[order],
        })
    }

    pub fn predict_next(&self, history: &[f64]) -> f64 {
        let n = history.len();
        self.intercept
            + self
                .coef
                .iter()
                .enumerate()
                .map(|(i, c)| c * history[n - 1 - i])
                .sum::<f64>()
    }

    /// Feeds its own predictions back for `horizon` steps.
    pub fn iterate(&self, context: &[f64], horizon: usize) -> Vec<f64> {
        let mut h = context.to_vec();
        for _ in 0..horizon {
            let next = self.predict_next(&h);
            h.push(next);
        }
        h.split_off(context.len())
    }
}
