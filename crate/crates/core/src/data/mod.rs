//! Stations, hourly tables, CSV ingestion, synthetic data, windows and splits.

pub mod csv_io;
pub mod dataset;
pub mod split;
pub mod station;
pub mod synth;
pub mod windows;

pub use csv_io::{ingest_csv, ingest_reader, write_dataset_csv, CsvSchema, TemperatureUnit};
pub use dataset::{
    CoordStats, Dataset, NormStats, Record, StationTable, N_VARS, TARGET, VARIABLES,
};
pub use split::{Periods, SplitSpec};
pub use station::{Registry, Station};
pub use synth::{generate_synthetic, synthesize, BandTriple, SynthConfig, SyntheticField};
pub use windows::{make_windows, window_at, window_origins, SeriesWindow, WindowShape};

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_preserves_tables() {
        let cfg = SynthConfig {
            grid: (3, 2),
            hours: 48,
            ..SynthConfig::with_seed(9)
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&ds, &mut buf).unwrap();
        let back = ingest_reader(buf.as_slice(), &CsvSchema::default()).unwrap();
        assert_eq!(back.registry, ds.registry);
        for (a, b) in ds.tables.iter().zip(&back.tables) {
            assert_eq!(a.hours, b.hours);
            for (ra, rb) in a.values.iter().zip(&b.values) {
                for v in 0..N_VARS {
                    // Kelvin on disk costs a few ulps per temperature.
                    assert!((ra[v] - rb[v]).abs() < 1e-9, "{} vs {}", ra[v], rb[v]);
                }
            }
        }
    }

    #[test]
    fn manifest_round_trip() {
        let cfg = SynthConfig {
            grid: (2, 2),
            hours: 30,
            ..SynthConfig::with_seed(2)
        };
        let mut ds = generate_synthetic(&cfg).unwrap();
        let ids: Vec<String> = ds.stations().iter().map(|s| s.id.clone()).collect();
        ds.norm_stats = Some(ds.compute_norm_stats(&ids, (i64::MIN, i64::MAX)).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = ds.save(dir.path()).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back.registry, ds.registry);
        assert_eq!(back.norm_stats, ds.norm_stats);
        assert_eq!(back.tables[1].hours, ds.tables[1].hours);
    }
}
