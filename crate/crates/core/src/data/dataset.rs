use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::csv_io::{self, CsvSchema};
use super::station::{Registry, Station};
use crate::error::{Error, Result};

/// Input variables, in column order.
pub const VARIABLES: [&str; N_VARS] = ["u10", "v10", "t2m", "d2m", "sp"];
pub const N_VARS: usize = 5;
/// Index of the forecast target (2 m temperature, °F) in [`VARIABLES`].
pub const TARGET: usize = 2;

pub type Record = [f64; N_VARS];

/// Hourly table of one station; hours are epoch hours, strictly increasing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StationTable {
    pub hours: Vec<i64>,
    pub values: Vec<Record>,
}

impl StationTable {
    pub fn len(&self) -> usize {
        self.hours.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hours.is_empty()
    }

    pub fn validate(&self, id: &str) -> Result<()> {
        if self.hours.len() != self.values.len() {
            return Err(Error::Data(format!("station {id}: ragged table")));
        }
        if let Some(w) = self.hours.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::Data(format!(
                "station {id}: hours not strictly increasing at {}",
                w[1]
            )));
        }
        if self.values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("station {id}: non-finite value")));
        }
        Ok(())
    }

    /// Row holding `hour`, if present.
    pub fn row_of(&self, hour: i64) -> Option<usize> {
        self.hours.binary_search(&hour).ok()
    }

    /// Rows covering `[start, start + len)` when every hour is present.
    pub fn contiguous(&self, start: i64, len: usize) -> Option<std::ops::Range<usize>> {
        if len == 0 {
            return Some(0..0);
        }
        let first = self.row_of(start)?;
        let last = first + len - 1;
        (last < self.hours.len() && self.hours[last] == start + len as i64 - 1)
            .then_some(first..last + 1)
    }

    pub fn column(&self, var: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[var]).collect()
    }
}

/// Per-variable z-score statistics from the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Record,
    pub std: Record,
}

impl NormStats {
    pub fn validate(&self) -> Result<()> {
        for v in 0..N_VARS {
            if !self.mean[v].is_finite() || !self.std[v].is_finite() || self.std[v] <= 0.0 {
                return Err(Error::Data(format!(
                    "normalization for {} is degenerate (mean {}, std {})",
                    VARIABLES[v], self.mean[v], self.std[v]
                )));
            }
        }
        Ok(())
    }

    pub fn normalize(&self, r: &Record) -> Record {
        let mut out = [0.0; N_VARS];
        for v in 0..N_VARS {
            out[v] = (r[v] - self.mean[v]) / self.std[v];
        }
        out
    }

    pub fn normalize_target(&self, y: f64) -> f64 {
        (y - self.mean[TARGET]) / self.std[TARGET]
    }

    pub fn denormalize_target(&self, z: f64) -> f64 {
        z * self.std[TARGET] + self.mean[TARGET]
    }
}

/// Standardization of `(lat, lon, elevation)` for location embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl CoordStats {
    pub fn from_stations(stations: &[Station]) -> Result<Self> {
        if stations.is_empty() {
            return Err(Error::Data("no stations for coordinate statistics".into()));
        }
        let n = stations.len() as f64;
        let cols = |f: fn(&Station) -> f64| stations.iter().map(f).collect::<Vec<_>>();
        let all = [
            cols(|s| s.lat),
            cols(|s| s.lon),
            cols(|s| s.elevation),
        ];
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for (i, col) in all.iter().enumerate() {
            mean[i] = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean[i]).powi(2)).sum::<f64>() / n;
            // A single station (or a flat field) still needs a usable scale.
            std[i] = if var.sqrt() > 1e-9 { var.sqrt() } else { 1.0 };
        }
        Ok(Self { mean, std })
    }

    pub fn standardize(&self, s: &Station) -> [f64; 3] {
        [
            (s.lat - self.mean[0]) / self.std[0],
            (s.lon - self.mean[1]) / self.std[1],
            (s.elevation - self.mean[2]) / self.std[2],
        ]
    }
}

/// Station registry plus one hourly table per station.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub registry: Registry,
    /// Aligned with `registry.stations()`.
    pub tables: Vec<StationTable>,
    pub norm_stats: Option<NormStats>,
    /// Rows dropped during ingestion because of missing values.
    pub dropped_rows: usize,
}

impl Dataset {
    pub fn new(registry: Registry, tables: Vec<StationTable>) -> Result<Self> {
        if registry.len() != tables.len() {
            return Err(Error::Data(format!(
                "{} stations but {} tables",
                registry.len(),
                tables.len()
            )));
        }
        for (st, t) in registry.stations().iter().zip(&tables) {
            t.validate(&st.id)?;
        }
        Ok(Self {
            registry,
            tables,
            norm_stats: None,
            dropped_rows: 0,
        })
    }

    pub fn stations(&self) -> &[Station] {
        self.registry.stations()
    }

    pub fn table(&self, id: &str) -> Option<&StationTable> {
        self.registry.position(id).map(|i| &self.tables[i])
    }

    /// Inclusive `[first, last]` epoch-hour span over all stations.
    pub fn hour_span(&self) -> Option<(i64, i64)> {
        let first = self.tables.iter().filter_map(|t| t.hours.first()).min()?;
        let last = self.tables.iter().filter_map(|t| t.hours.last()).max()?;
        Some((*first, *last))
    }

    /// Z-score statistics over the given stations and hours `[start, end)`.
    pub fn compute_norm_stats<S: AsRef<str>>(
        &self,
        ids: &[S],
        hours: (i64, i64),
    ) -> Result<NormStats> {
        let mut sum = [0.0; N_VARS];
        let mut sq = [0.0; N_VARS];
        let mut n = 0usize;
        for id in ids {
            let table = self
                .table(id.as_ref())
                .ok_or_else(|| Error::Data(format!("unknown station {}", id.as_ref())))?;
            for (h, r) in table.hours.iter().zip(&table.values) {
                if *h < hours.0 || *h >= hours.1 {
                    continue;
                }
                for v in 0..N_VARS {
                    sum[v] += r[v];
                }
                n += 1;
            }
        }
        if n < 2 {
            return Err(Error::Data("too few rows for normalization statistics".into()));
        }
        let mut mean = [0.0; N_VARS];
        for v in 0..N_VARS {
            mean[v] = sum[v] / n as f64;
        }
        for id in ids {
            let table = self.table(id.as_ref()).expect("checked above");
            for (h, r) in table.hours.iter().zip(&table.values) {
                if *h < hours.0 || *h >= hours.1 {
                    continue;
                }
                for v in 0..N_VARS {
                    sq[v] += (r[v] - mean[v]).powi(2);
                }
            }
        }
        let mut std = [0.0; N_VARS];
        for v in 0..N_VARS {
            std[v] = (sq[v] / n as f64).sqrt();
        }
        let stats = NormStats { mean, std };
        stats.validate()?;
        Ok(stats)
    }

    /// Writes `manifest.json` and one CSV per station under `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let station_dir = dir.join("stations");
        fs::create_dir_all(&station_dir).map_err(|e| Error::io(&station_dir, e))?;
        let mut entries = Vec::with_capacity(self.registry.len());
        for (st, table) in self.stations().iter().zip(&self.tables) {
            let rel = format!("stations/{}.csv", st.id);
            csv_io::write_station_csv(&dir.join(&rel), st, table)?;
            entries.push(ManifestStation {
                station: st.clone(),
                csv: rel,
            });
        }
        let manifest = Manifest {
            version: 1,
            variables: VARIABLES.iter().map(|s| s.to_string()).collect(),
            stations: entries,
            norm_stats: self.norm_stats,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Loads a dataset written by [`Dataset::save`].
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut parts = Vec::new();
        for entry in &manifest.stations {
            let ds = csv_io::ingest_csv(&base.join(&entry.csv), &CsvSchema::default())?;
            if ds.registry.len() > 1 {
                return Err(Error::Data(format!(
                    "{} holds more than one station",
                    entry.csv
                )));
            }
            let table = ds.tables.into_iter().next().unwrap_or_default();
            parts.push((entry.station.clone(), table));
        }
        let registry = Registry::new(parts.iter().map(|(s, _)| s.clone()).collect())?;
        let mut tables = vec![StationTable::default(); registry.len()];
        for (st, table) in parts {
            let i = registry.position(&st.id).expect("registered above");
            tables[i] = table;
        }
        let mut ds = Dataset::new(registry, tables)?;
        ds.norm_stats = manifest.norm_stats;
        Ok(ds)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestStation {
    #[serde(flatten)]
    station: Station,
    csv: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    variables: Vec<String>,
    stations: Vec<ManifestStation>,
    norm_stats: Option<NormStats>,
}

pub fn fahrenheit_from_kelvin(k: f64) -> f64 {
    (k - 273.15) * 9.0 / 5.0 + 32.0
}

pub fn kelvin_from_fahrenheit(f: f64) -> f64 {
    (f - 32.0) * 5.0 / 9.0 + 273.15
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(hours: &[i64]) -> StationTable {
        StationTable {
            hours: hours.to_vec(),
            values: hours.iter().map(|&h| [h as f64; N_VARS]).collect(),
        }
    }

    #[test]
    fn contiguous_ranges() {
        let t = table(&[0, 1, 2, 4, 5]);
        assert_eq!(t.contiguous(0, 3), Some(0..3));
        assert_eq!(t.contiguous(1, 3), None);
        assert_eq!(t.contiguous(4, 2), Some(3..5));
        assert_eq!(t.contiguous(7, 0), Some(0..0));
    }

    #[test]
    fn rejects_unsorted_hours() {
        assert!(table(&[0, 2, 1]).validate("x").is_err());
        assert!(table(&[0, 0]).validate("x").is_err());
    }

    #[test]
    fn freezing_point_conversion() {
        assert!((fahrenheit_from_kelvin(273.15) - 32.0).abs() < 1e-12);
        assert!((kelvin_from_fahrenheit(212.0) - 373.15).abs() < 1e-12);
    }

    #[test]
    fn norm_stats_reject_constant_column() {
        let st = Station::new("a", 0.0, 0.0, 0.0).unwrap();
        let t = StationTable {
            hours: vec![0, 1, 2],
            values: vec![[1.0; N_VARS]; 3],
        };
        let ds = Dataset::new(Registry::new(vec![st]).unwrap(), vec![t]).unwrap();
        assert!(ds.compute_norm_stats(&["a"], (0, 3)).is_err());
    }
}
