//! Metrics, baselines, correlation analysis and evaluation sweeps.

pub mod baselines;
pub mod corr;
pub mod metrics;
pub mod report;

pub use baselines::{baselines, ArModel, Baseline, AR_ORDER};
pub use corr::{corr_vs_distance, pearson, CorrRow, CorrTable};
pub use metrics::{
    coverage, crps_gaussian, freeze_f1, interval_z, mase, metrics_point, nll_gaussian, wind_speed_mph,
    PointMetrics, FREEZE_F, MAPE_GUARD, SEASON,
};
pub use report::{
    evaluate_baselines, evaluate_model, sweep, Averages, EvalOptions, MetricReport, StationMetrics, Sweep,
    SweepAxis,
};
