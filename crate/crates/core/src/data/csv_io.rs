//! CSV boundary: `station_id, lat, lon, elevation, timestamp_iso, u10, v10,
//! t2m, d2m, sp`. Temperatures are Kelvin on disk and °F in memory.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use super::dataset::{
    fahrenheit_from_kelvin, kelvin_from_fahrenheit, Dataset, Record, StationTable, N_VARS,
};
use super::station::{Registry, Station};
use crate::error::{Error, Result};

pub const COLUMNS: [&str; 10] = [
    "station_id",
    "lat",
    "lon",
    "elevation",
    "timestamp_iso",
    "u10",
    "v10",
    "t2m",
    "d2m",
    "sp",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemperatureUnit {
    #[default]
    Kelvin,
    Fahrenheit,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    #[serde(default)]
    pub temperature_unit: TemperatureUnit,
}

impl CsvSchema {
    fn to_fahrenheit(&self, t: f64) -> f64 {
        match self.temperature_unit {
            TemperatureUnit::Kelvin => fahrenheit_from_kelvin(t),
            TemperatureUnit::Fahrenheit => t,
        }
    }
}

const TEMPERATURE_VARS: [usize; 2] = [2, 3];

fn is_missing(field: &str) -> bool {
    let f = field.trim();
    f.is_empty() || f.eq_ignore_ascii_case("na") || f.eq_ignore_ascii_case("nan")
}

/// Parses an ISO-8601 timestamp on an exact hour into epoch hours.
pub fn parse_hour(s: &str) -> std::result::Result<i64, String> {
    let s = s.trim();
    let secs = if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        dt.timestamp()
    } else {
        let naive = ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"]
            .iter()
            .find_map(|fmt| NaiveDateTime::parse_from_str(s, fmt).ok())
            .ok_or_else(|| format!("unparseable timestamp {s:?}"))?;
        naive.and_utc().timestamp()
    };
    if secs.rem_euclid(3600) != 0 {
        return Err(format!("timestamp {s:?} is not on the hour"));
    }
    Ok(secs.div_euclid(3600))
}

pub fn format_hour(hour: i64) -> String {
    Utc.timestamp_opt(hour * 3600, 0)
        .single()
        .map(|dt| dt.format("%Y-%m-%dT%H:00:00Z").to_string())
        .unwrap_or_else(|| format!("hour {hour}"))
}

pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file, schema)
}

pub fn ingest_reader<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    // An empty file has no header row at all.
    if headers.is_empty() {
        return Dataset::new(Registry::default(), Vec::new());
    }
    let mut col = [0usize; COLUMNS.len()];
    for (i, name) in COLUMNS.iter().enumerate() {
        col[i] = headers
            .iter()
            .position(|h| h == *name)
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: format!("missing column {name}"),
            })?;
    }

    let mut meta: BTreeMap<String, Station> = BTreeMap::new();
    let mut rows: BTreeMap<String, BTreeMap<i64, Record>> = BTreeMap::new();
    let mut dropped = 0usize;

    for result in rdr.records() {
        let record = result?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let parse_err = |message: String| Error::Parse { line, message };
        if record.len() != headers.len() {
            return Err(parse_err(format!(
                "expected {} fields, found {}",
                headers.len(),
                record.len()
            )));
        }
        let field = |i: usize| record.get(col[i]).unwrap_or("");
        let id = field(0).to_string();
        if id.is_empty() {
            return Err(parse_err("empty station_id".into()));
        }
        if (1..COLUMNS.len()).any(|i| i != 4 && is_missing(field(i))) || is_missing(field(4)) {
            dropped += 1;
            continue;
        }
        let num = |i: usize| -> Result<f64> {
            let v: f64 = field(i)
                .parse()
                .map_err(|_| parse_err(format!("{}: not a number: {:?}", COLUMNS[i], field(i))))?;
            if !v.is_finite() {
                return Err(parse_err(format!("{}: non-finite value", COLUMNS[i])));
            }
            Ok(v)
        };
        let (lat, lon, elev) = (num(1)?, num(2)?, num(3)?);
        let hour = parse_hour(field(4)).map_err(parse_err)?;
        let mut values = [0.0; N_VARS];
        for v in 0..N_VARS {
            values[v] = num(5 + v)?;
        }
        for &t in &TEMPERATURE_VARS {
            values[t] = schema.to_fahrenheit(values[t]);
        }

        match meta.get(&id) {
            Some(st) if st.lat != lat || st.lon != lon || st.elevation != elev => {
                return Err(parse_err(format!(
                    "station {id}: coordinates differ from earlier rows"
                )));
            }
            Some(_) => {}
            None => {
                let st = Station::new(id.clone(), lat, lon, elev)
                    .map_err(|e| parse_err(e.to_string()))?;
                meta.insert(id.clone(), st);
            }
        }
        let per_station = rows.entry(id.clone()).or_default();
        if per_station.insert(hour, values).is_some() {
            return Err(Error::DuplicateRecord {
                station: id,
                timestamp: format_hour(hour),
            });
        }
    }

    let registry = Registry::new(meta.into_values().collect())?;
    let tables = registry
        .stations()
        .iter()
        .map(|st| {
            let r = rows.remove(&st.id).unwrap_or_default();
            StationTable {
                hours: r.keys().copied().collect(),
                values: r.into_values().collect(),
            }
        })
        .collect();
    let mut ds = Dataset::new(registry, tables)?;
    ds.dropped_rows = dropped;
    Ok(ds)
}

fn write_rows<W: Write>(
    wtr: &mut csv::Writer<W>,
    st: &Station,
    table: &StationTable,
) -> Result<()> {
    for (h, r) in table.hours.iter().zip(&table.values) {
        let mut out: Vec<String> = vec![
            st.id.clone(),
            st.lat.to_string(),
            st.lon.to_string(),
            st.elevation.to_string(),
            format_hour(*h),
        ];
        for v in 0..N_VARS {
            let value = if TEMPERATURE_VARS.contains(&v) {
                kelvin_from_fahrenheit(r[v])
            } else {
                r[v]
            };
            out.push(value.to_string());
        }
        wtr.write_record(&out)?;
    }
    Ok(())
}

pub fn write_station_csv(path: &Path, st: &Station, table: &StationTable) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut wtr = csv::Writer::from_writer(file);
    wtr.write_record(COLUMNS)?;
    write_rows(&mut wtr, st, table)?;
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes every station into one CSV with the ingestion schema.
pub fn write_dataset_csv<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(COLUMNS)?;
    for (st, table) in ds.stations().iter().zip(&ds.tables) {
        write_rows(&mut wtr, st, table)?;
    }
    wtr.flush()
        .map_err(|e| Error::Data(format!("csv flush failed: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "station_id,lat,lon,elevation,timestamp_iso,u10,v10,t2m,d2m,sp\n";

    fn ingest(text: &str) -> Result<Dataset> {
        ingest_reader(text.as_bytes(), &CsvSchema::default())
    }

    #[test]
    fn empty_file_gives_empty_dataset() {
        let ds = ingest("").unwrap();
        assert_eq!(ds.registry.len(), 0);
        let ds = ingest(HEADER).unwrap();
        assert_eq!(ds.registry.len(), 0);
    }

    #[test]
    fn kelvin_is_stored_as_fahrenheit() {
        let text = format!("{HEADER}A,45,-120,100,2020-01-01T00:00:00Z,1,2,273.15,270,1000\n");
        let ds = ingest(&text).unwrap();
        let t = ds.table("A").unwrap();
        assert!((t.values[0][2] - 32.0).abs() < 1e-12);
        assert_eq!(t.hours[0], 438_288);
    }

    #[test]
    fn duplicate_timestamp_names_station_and_time() {
        let row = "A,45,-120,100,2020-01-01T05:00:00Z,1,2,280,270,1000\n";
        let text = format!("{HEADER}{row}{row}");
        let err = ingest(&text).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::DuplicateRecord { .. }));
        assert!(msg.contains('A') && msg.contains("2020-01-01T05:00:00Z"), "{msg}");
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = format!(
            "{HEADER}A,45,-120,100,2020-01-01T00:00:00Z,1,2,280,270,1000\n\
             A,45,-120,100,2020-01-01T01:00:00Z,1,oops,280,270,1000\n"
        );
        match ingest(&text).unwrap_err() {
            Error::Parse { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("v10"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_values_are_dropped_and_counted() {
        let text = format!(
            "{HEADER}A,45,-120,100,2020-01-01T00:00:00Z,1,2,280,270,1000\n\
             A,45,-120,100,2020-01-01T01:00:00Z,1,,280,270,1000\n\
             A,45,-120,100,2020-01-01T02:00:00Z,NaN,2,280,270,1000\n"
        );
        let ds = ingest(&text).unwrap();
        assert_eq!(ds.dropped_rows, 2);
        assert_eq!(ds.table("A").unwrap().len(), 1);
    }

    #[test]
    fn rows_are_sorted_per_station() {
        let text = format!(
            "{HEADER}B,45,-120,100,2020-01-01T02:00:00Z,1,2,280,270,1000\n\
             B,45,-120,100,2020-01-01T00:00:00Z,1,2,281,270,1000\n"
        );
        let ds = ingest(&text).unwrap();
        let t = ds.table("B").unwrap();
        assert!(t.hours[0] < t.hours[1]);
    }

    #[test]
    fn off_hour_timestamp_is_rejected() {
        assert!(parse_hour("2020-01-01T00:30:00Z").is_err());
        assert_eq!(parse_hour("1970-01-01 02:00:00"), Ok(2));
        assert_eq!(format_hour(2), "1970-01-01T02:00:00Z");
    }
}
