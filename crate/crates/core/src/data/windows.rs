use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, NormStats, StationTable, N_VARS, TARGET, VARIABLES};
use crate::error::{Error, Result};

/// Aligned context and horizon for one station.
///
/// `t0` is the first horizon hour; the context covers `[t0 - L_x, t0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesWindow {
    pub station_id: String,
    pub t0: i64,
    /// Row-major `[L_x × n]`, z-scored.
    pub context: Vec<f64>,
    /// Target variable in physical units (°F).
    pub horizon: Vec<f64>,
    pub variable_names: Vec<String>,
}

impl SeriesWindow {
    pub fn context_len(&self) -> usize {
        self.context.len() / self.variable_names.len().max(1)
    }

    pub fn context_row(&self, i: usize) -> &[f64] {
        let n = self.variable_names.len();
        &self.context[i * n..(i + 1) * n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowShape {
    pub lx: usize,
    pub ly: usize,
    pub stride: usize,
}

impl WindowShape {
    pub fn new(lx: usize, ly: usize, stride: usize) -> Result<Self> {
        if ly == 0 || stride == 0 {
            return Err(Error::Config(format!(
                "window needs L_y >= 1 and stride >= 1 (got L_y = {ly}, stride = {stride})"
            )));
        }
        Ok(Self { lx, ly, stride })
    }

    pub fn span(&self) -> usize {
        self.lx + self.ly
    }
}

/// Forecast origins `t0` of every gap-free window of `table`.
///
/// Candidate window starts are spaced `stride` hours apart from the
/// station's first hour. When `horizon_range = Some((a, b))` only windows
/// whose horizon lies inside `[a, b)` are kept; the context may precede `a`.
pub fn window_origins(
    table: &StationTable,
    shape: WindowShape,
    horizon_range: Option<(i64, i64)>,
) -> Vec<i64> {
    let Some(&first) = table.hours.first() else {
        return Vec::new();
    };
    let span = shape.span() as i64;
    let n = table.hours.len();
    // run[i]: number of consecutive hours starting at row i.
    let mut run = vec![1usize; n];
    for i in (0..n.saturating_sub(1)).rev() {
        if table.hours[i + 1] == table.hours[i] + 1 {
            run[i] = run[i + 1] + 1;
        }
    }
    let mut out = Vec::new();
    for (i, &h) in table.hours.iter().enumerate() {
        if (h - first) % shape.stride as i64 != 0 || (run[i] as i64) < span {
            continue;
        }
        let t0 = h + shape.lx as i64;
        if let Some((a, b)) = horizon_range {
            if t0 < a || t0 + shape.ly as i64 > b {
                continue;
            }
        }
        out.push(t0);
    }
    out
}

/// Builds the window ending its context at `t0`, or `None` across a gap.
pub fn window_at(
    id: &str,
    table: &StationTable,
    norm: &NormStats,
    lx: usize,
    ly: usize,
    t0: i64,
) -> Option<SeriesWindow> {
    let rows = table.contiguous(t0 - lx as i64, lx + ly)?;
    let mut context = Vec::with_capacity(lx * N_VARS);
    for r in &table.values[rows.start..rows.start + lx] {
        context.extend_from_slice(&norm.normalize(r));
    }
    let horizon = table.values[rows.start + lx..rows.end]
        .iter()
        .map(|r| r[TARGET])
        .collect();
    Some(SeriesWindow {
        station_id: id.to_string(),
        t0,
        context,
        horizon,
        variable_names: VARIABLES.iter().map(|s| s.to_string()).collect(),
    })
}

/// Lazily yields windows of every station, in registry order then time.
pub fn make_windows(
    ds: &Dataset,
    lx: usize,
    ly: usize,
    stride: usize,
) -> Result<impl Iterator<Item = SeriesWindow> + '_> {
    let shape = WindowShape::new(lx, ly, stride)?;
    let norm = ds
        .norm_stats
        .ok_or_else(|| Error::Data("dataset has no normalization statistics".into()))?;
    Ok(ds
        .stations()
        .iter()
        .zip(&ds.tables)
        .flat_map(move |(st, table)| {
            window_origins(table, shape, None)
                .into_iter()
                .filter_map(move |t0| window_at(&st.id, table, &norm, lx, ly, t0))
        }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Registry, Station};
    use proptest::prelude::*;

    fn table(hours: Vec<i64>) -> StationTable {
        let values = hours.iter().map(|&h| [h as f64, 0.0, h as f64, 1.0, 2.0]).collect();
        StationTable { hours, values }
    }

    fn dataset(hours: Vec<i64>) -> Dataset {
        let st = Station::new("A", 45.0, -120.0, 10.0).unwrap();
        let mut ds = Dataset::new(Registry::new(vec![st]).unwrap(), vec![table(hours)]).unwrap();
        ds.norm_stats = Some(NormStats {
            mean: [0.0; N_VARS],
            std: [1.0, 1.0, 2.0, 1.0, 1.0],
        });
        ds
    }

    fn count(hours: Vec<i64>, lx: usize, ly: usize, stride: usize) -> usize {
        make_windows(&dataset(hours), lx, ly, stride).unwrap().count()
    }

    #[test]
    fn window_counts() {
        assert_eq!(count((0..100).collect(), 96, 48, 1), 0);
        assert_eq!(count((0..144).collect(), 96, 48, 1), 1);
        assert_eq!(count((0..168).collect(), 96, 48, 1), 25);
        assert_eq!(count((0..168).collect(), 96, 48, 24), 2);
    }

    #[test]
    fn context_is_normalized_and_horizon_is_not() {
        let ds = dataset((0..10).collect());
        let w = make_windows(&ds, 3, 2, 1).unwrap().next().unwrap();
        assert_eq!(w.t0, 3);
        assert_eq!(w.context_len(), 3);
        assert_eq!(w.context_row(2)[2], 1.0);
        assert_eq!(w.horizon, vec![3.0, 4.0]);
    }

    #[test]
    fn cold_start_windows_have_empty_context() {
        let ds = dataset((0..5).collect());
        let ws: Vec<_> = make_windows(&ds, 0, 2, 1).unwrap().collect();
        assert_eq!(ws.len(), 4);
        assert!(ws.iter().all(|w| w.context.is_empty()));
    }

    #[test]
    fn horizon_range_allows_context_before_it() {
        let t = table((0..50).collect());
        let shape = WindowShape::new(10, 5, 1).unwrap();
        let o = window_origins(&t, shape, Some((20, 30)));
        assert_eq!(o, (20..=25).collect::<Vec<_>>());
    }

    #[test]
    fn bad_shapes_are_rejected() {
        assert!(WindowShape::new(4, 0, 1).is_err());
        assert!(WindowShape::new(4, 1, 0).is_err());
    }

    /// Enumerates every start hour and checks each window hour explicitly.
    fn brute_force(hours: &[i64], lx: usize, ly: usize, stride: usize) -> usize {
        let Some(&first) = hours.first() else { return 0 };
        let last = *hours.last().unwrap();
        let present = |h: i64| hours.contains(&h);
        (first..=last)
            .filter(|s| (s - first) % stride as i64 == 0)
            .filter(|&s| (0..(lx + ly) as i64).all(|k| present(s + k)))
            .count()
    }

    proptest! {
        #[test]
        fn counts_match_brute_force(
            keep in proptest::collection::vec(proptest::bool::weighted(0.93), 0..160),
            lx in 0usize..20,
            ly in 1usize..10,
            stride in 1usize..5,
        ) {
            let hours: Vec<i64> = keep.iter().enumerate().filter(|(_, k)| **k).map(|(i, _)| i as i64).collect();
            prop_assert_eq!(count(hours.clone(), lx, ly, stride), brute_force(&hours, lx, ly, stride));
        }
    }
}
