//! Metric reports over test windows, for trained models and baselines.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::baselines::Baseline;
use super::metrics::{self, SEASON};
use crate::data::{Dataset, SplitSpec, StationTable, WindowShape, TARGET};
use crate::error::{Error, Result};
use crate::model::{Assembler, Forecast, Model};
use crate::train::{groups_by_origin, indices};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Target context hours; `None` means the model's full `L_x`.
    #[serde(default)]
    pub context_len: Option<usize>,
    /// Leading horizon hours scored; `None` means all of `L_y`.
    #[serde(default)]
    pub horizon: Option<usize>,
    /// Hours between forecast origins.
    pub stride: usize,
    pub coverage_level: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            context_len: None,
            horizon: None,
            stride: 24,
            coverage_level: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationMetrics {
    pub station_id: String,
    pub windows: usize,
    pub mse: f64,
    pub mae: f64,
    pub mape: Option<f64>,
    pub smape: Option<f64>,
    pub mase: Option<f64>,
    pub mape_excluded: usize,
    pub nll: Option<f64>,
    pub crps: Option<f64>,
    pub coverage: Option<f64>,
    pub per_hour_mse: Vec<f64>,
    pub per_hour_mae: Vec<f64>,
}

/// Means over stations of the per-station values; optional metrics
/// average over the stations that have them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub mse: f64,
    pub mae: f64,
    pub mape: Option<f64>,
    pub smape: Option<f64>,
    pub mase: Option<f64>,
    pub mape_excluded: usize,
    pub nll: Option<f64>,
    pub crps: Option<f64>,
    pub coverage: Option<f64>,
    pub per_hour_mse: Vec<f64>,
    pub per_hour_mae: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub context_len: usize,
    pub horizon: usize,
    pub coverage_level: f64,
    pub stations: Vec<StationMetrics>,
    pub average: Averages,
}

fn mean_of<I: Iterator<Item = f64>>(it: I) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl MetricReport {
    pub fn from_stations(
        label: impl Into<String>,
        context_len: usize,
        horizon: usize,
        coverage_level: f64,
        mut stations: Vec<StationMetrics>,
    ) -> Result<Self> {
        if stations.is_empty() {
            return Err(Error::Metric("report has no stations".into()));
        }
        if stations.iter().any(|s| s.per_hour_mse.len() != horizon) {
            return Err(Error::Metric("per-hour curves do not match the horizon".into()));
        }
        stations.sort_by(|a, b| a.station_id.cmp(&b.station_id));
        let s = &stations;
        let opt = |f: fn(&StationMetrics) -> Option<f64>| mean_of(s.iter().filter_map(f));
        let per_hour = |f: fn(&StationMetrics) -> &Vec<f64>| -> Vec<f64> {
            (0..horizon)
                .map(|h| s.iter().map(|m| f(m)[h]).sum::<f64>() / s.len() as f64)
                .collect()
        };
        let average = Averages {
            mse: mean_of(s.iter().map(|m| m.mse)).unwrap_or_default(),
            mae: mean_of(s.iter().map(|m| m.mae)).unwrap_or_default(),
            mape: opt(|m| m.mape),
            smape: opt(|m| m.smape),
            mase: opt(|m| m.mase),
            mape_excluded: s.iter().map(|m| m.mape_excluded).sum(),
            nll: opt(|m| m.nll),
            crps: opt(|m| m.crps),
            coverage: opt(|m| m.coverage),
            per_hour_mse: per_hour(|m| &m.per_hour_mse),
            per_hour_mae: per_hour(|m| &m.per_hour_mae),
        };
        Ok(Self {
            label: label.into(),
            context_len,
            horizon,
            coverage_level,
            stations,
            average,
        })
    }

    /// Joins reports over disjoint stations, such as one per adapted model.
    pub fn merge(label: impl Into<String>, reports: Vec<MetricReport>) -> Result<Self> {
        let first = reports.first().ok_or_else(|| Error::Metric("nothing to merge".into()))?;
        let (c, h, lvl) = (first.context_len, first.horizon, first.coverage_level);
        if reports.iter().any(|r| r.context_len != c || r.horizon != h) {
            return Err(Error::Metric("merged reports must share context and horizon".into()));
        }
        let stations: Vec<StationMetrics> = reports.into_iter().flat_map(|r| r.stations).collect();
        let mut ids: Vec<&str> = stations.iter().map(|s| s.station_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Metric("merged reports overlap in stations".into()));
        }
        Self::from_stations(label, c, h, lvl, stations)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Averaged per-horizon-hour curves: `hour,mse,mae`.
    pub fn write_per_hour_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["hour", "mse", "mae"])?;
        for h in 0..self.horizon {
            out.write_record([
                (h + 1).to_string(),
                self.average.per_hour_mse[h].to_string(),
                self.average.per_hour_mae[h].to_string(),
            ])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// In-sample seasonal-naive MAE over the rows of `table` inside `range`,
/// pairing each hour with the hour one period earlier when both exist.
fn seasonal_scale_hourly(table: &StationTable, range: (i64, i64), period: usize) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for (h, r) in table.hours.iter().zip(&table.values) {
        let back = h - period as i64;
        if *h >= range.1 || back < range.0 {
            continue;
        }
        if let Some(j) = table.row_of(back) {
            s += (r[TARGET] - table.values[j][TARGET]).abs();
            n += 1;
        }
    }
    (n > 0 && s > 0.0).then(|| s / n as f64)
}

/// Accumulates one station's forecasts.
struct Accum {
    id: String,
    preds: Vec<f64>,
    truths: Vec<f64>,
    var: Vec<f64>,
    windows: usize,
}

impl Accum {
    fn new(id: &str) -> Self {
        Self {
            id: id.to_string(),
            preds: Vec::new(),
            truths: Vec::new(),
            var: Vec::new(),
            windows: 0,
        }
    }

    fn finish(self, horizon: usize, scale: Option<f64>, level: f64) -> Result<StationMetrics> {
        let p = metrics::metrics_point(&self.preds, &self.truths)
            .map_err(|e| Error::Metric(format!("{}: {e}", self.id)))?;
        let n = self.windows as f64;
        let mut per_hour_mse = vec![0.0; horizon];
        let mut per_hour_mae = vec![0.0; horizon];
        for (k, (a, y)) in self.preds.iter().zip(&self.truths).enumerate() {
            per_hour_mse[k % horizon] += (a - y).powi(2) / n;
            per_hour_mae[k % horizon] += (a - y).abs() / n;
        }
        let (mut nll, mut crps, mut coverage) = (None, None, None);
        if !self.var.is_empty() {
            let z = metrics::interval_z(level)?;
            let (mut sn, mut sc, mut hit) = (0.0, 0.0, 0usize);
            for ((m, v), y) in self.preds.iter().zip(&self.var).zip(&self.truths) {
                sn += metrics::nll_gaussian(*m, *v, *y)?;
                sc += metrics::crps_gaussian(*m, v.sqrt(), *y)?;
                hit += usize::from((y - m).abs() <= z * v.sqrt());
            }
            let len = self.preds.len() as f64;
            nll = Some(sn / len);
            crps = Some(sc / len);
            coverage = Some(hit as f64 / len);
        }
        Ok(StationMetrics {
            station_id: self.id,
            windows: self.windows,
            mse: p.mse,
            mae: p.mae,
            mape: p.mape,
            smape: p.smape,
            mase: scale.map(|s| p.mae / s),
            mape_excluded: p.excluded,
            nll,
            crps,
            coverage,
            per_hour_mse,
            per_hour_mae,
        })
    }
}

fn check_horizon(h: usize, ly: usize) -> Result<usize> {
    if h == 0 || h > ly {
        return Err(Error::Config(format!("horizon {h} must lie in 1..={ly}")));
    }
    Ok(h)
}

/// Scores `model` on the test period of `stations`, retrieving from the
/// train stations. Retrieved stations always supply their full context.
pub fn evaluate_model(
    model: &Model,
    ds: &Dataset,
    split: &SplitSpec,
    stations: &[String],
    opts: &EvalOptions,
    label: &str,
) -> Result<MetricReport> {
    let cfg = &model.cfg;
    let c = opts.context_len.unwrap_or(cfg.lx);
    cfg.check_context_len(c)?;
    let h = check_horizon(opts.horizon.unwrap_or(cfg.ly), cfg.ly)?;
    let span = ds.hour_span().ok_or_else(|| Error::Data("dataset is empty".into()))?;
    let periods = split.periods(span);
    let idx = indices(ds, stations)?;
    let groups = groups_by_origin(ds, &idx, WindowShape::new(cfg.lx, cfg.ly, opts.stride)?, periods.test);
    let asm = Assembler::new(ds, cfg, &split.train_station_ids, model.norm, model.coords)?;
    let mut acc: Vec<Accum> = stations.iter().map(|s| Accum::new(s)).collect();
    let slot = |i: usize| idx.iter().position(|&j| j == i).expect("evaluated station");
    for items in &groups {
        let batch = asm.batch(items, c)?;
        let out = model.predict(&batch)?;
        for (f, &(t0, i)) in out.iter().zip(items) {
            let truth = asm.horizon_at(i, t0).expect("window has a horizon");
            let a = &mut acc[slot(i)];
            a.preds.extend_from_slice(&f.mean()[..h]);
            a.truths.extend_from_slice(&truth[..h]);
            if let Forecast::Gaussian(g) = f {
                a.var.extend_from_slice(&g.sigma2[..h]);
            }
            a.windows += 1;
        }
    }
    finish_all(ds, &idx, acc, periods.train, c, h, opts.coverage_level, label)
}

#[allow(clippy::too_many_arguments)]
fn finish_all(
    ds: &Dataset,
    idx: &[usize],
    acc: Vec<Accum>,
    train: (i64, i64),
    c: usize,
    h: usize,
    level: f64,
    label: &str,
) -> Result<MetricReport> {
    let stations = acc
        .into_iter()
        .zip(idx)
        .map(|(a, &i)| {
            if a.windows == 0 {
                return Err(Error::Data(format!("{}: no test windows", a.id)));
            }
            a.finish(h, seasonal_scale_hourly(&ds.tables[i], train, SEASON), level)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_stations(label, c, h, level, stations)
}

/// Scores each baseline on the same windows a model with context `lx` and
/// horizon `ly` would see; baselines read `opts.context_len` hours of the
/// target's own temperature.
pub fn evaluate_baselines(
    ds: &Dataset,
    split: &SplitSpec,
    stations: &[String],
    lx: usize,
    ly: usize,
    opts: &EvalOptions,
) -> Result<Vec<(Baseline, Result<MetricReport>)>> {
    let c = opts.context_len.unwrap_or(lx);
    if c > lx {
        return Err(Error::Config(format!("context {c} exceeds L_x = {lx}")));
    }
    let h = check_horizon(opts.horizon.unwrap_or(ly), ly)?;
    let span = ds.hour_span().ok_or_else(|| Error::Data("dataset is empty".into()))?;
    let periods = split.periods(span);
    let idx = indices(ds, stations)?;
    let groups = groups_by_origin(ds, &idx, WindowShape::new(lx, ly, opts.stride)?, periods.test);
    let mut out = Vec::new();
    for b in Baseline::ALL {
        let mut acc: Vec<Accum> = stations.iter().map(|s| Accum::new(s)).collect();
        let mut run = || -> Result<MetricReport> {
            for &(t0, i) in groups.iter().flatten() {
                let t = &ds.tables[i];
                let rows = t.contiguous(t0 - c as i64, c + h).expect("window is gap-free");
                let vals: Vec<f64> = t.values[rows].iter().map(|r| r[TARGET]).collect();
                let (ctx, truth) = vals.split_at(c);
                let a = &mut acc[idx.iter().position(|&j| j == i).expect("evaluated")];
                a.preds.extend(b.forecast(ctx, h)?);
                a.truths.extend_from_slice(truth);
                a.windows += 1;
            }
            finish_all(ds, &idx, std::mem::take(&mut acc), periods.train, c, h, opts.coverage_level, b.name())
        };
        out.push((b, run()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Horizon,
    ContextLen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub points: Vec<(usize, MetricReport)>,
    /// Values the model cannot run, with the reason.
    pub skipped: Vec<(usize, String)>,
}

/// Re-evaluates a fixed model at each value along `axis`.
pub fn sweep(
    model: &Model,
    ds: &Dataset,
    split: &SplitSpec,
    stations: &[String],
    axis: SweepAxis,
    values: &[usize],
    opts: &EvalOptions,
) -> Result<Sweep> {
    let mut out = Sweep {
        axis,
        points: Vec::new(),
        skipped: Vec::new(),
    };
    for &v in values {
        let valid = match axis {
            SweepAxis::Horizon => check_horizon(v, model.cfg.ly).map(|_| ()),
            SweepAxis::ContextLen => model.cfg.check_context_len(v),
        };
        if let Err(e) = valid {
            out.skipped.push((v, e.to_string()));
            continue;
        }
        let mut o = *opts;
        match axis {
            SweepAxis::Horizon => o.horizon = Some(v),
            SweepAxis::ContextLen => o.context_len = Some(v),
        }
        let label = format!("{axis:?}={v}");
        out.points.push((v, evaluate_model(model, ds, split, stations, &o, &label)?));
    }
    Ok(out)
}
