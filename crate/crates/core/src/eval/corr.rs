//! Band-wise correlation between station pairs as a function of distance.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use statrs::statistics::Statistics;

use crate::data::{Dataset, TARGET};
use crate::error::{Error, Result};
use crate::multires::{band_component, BandSpec};
use crate::retrieval::haversine;
use crate::rng::rng_for;

/// Pairs overlapping by fewer hours than this are skipped.
pub const MIN_OVERLAP: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrRow {
    pub station_a: String,
    pub station_b: String,
    pub distance_km: f64,
    pub band: String,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrTable {
    pub bands: Vec<String>,
    pub rows: Vec<CorrRow>,
    /// Pairs dropped for short overlap or a constant component.
    pub skipped: usize,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (sa, sb) = (a.std_dev(), b.std_dev());
    if !(sa > 0.0 && sb > 0.0) {
        return None;
    }
    Some((a.covariance(b) / (sa * sb)).clamp(-1.0, 1.0))
}

/// Longest run of consecutive hours present in both tables, as
/// `(start hour, len)`.
fn common_run(a: &[i64], b: &[i64]) -> (i64, usize) {
    let (mut i, mut j) = (0, 0);
    let (mut best, mut cur): ((i64, usize), (i64, usize)) = ((0, 0), (0, 0));
    let mut prev: Option<i64> = None;
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                let h = a[i];
                cur = if prev == Some(h - 1) { (cur.0, cur.1 + 1) } else { (h, 1) };
                if cur.1 > best.1 {
                    best = cur;
                }
                prev = Some(h);
                i += 1;
                j += 1;
            }
        }
    }
    best
}

/// Samples up to `n_pairs` distinct station pairs (all pairs when fewer
/// exist), band-decomposes each station's temperature over the pair's
/// common hours and records the Pearson correlation per band.
pub fn corr_vs_distance(ds: &Dataset, spec: &BandSpec, n_pairs: usize, seed: u64) -> Result<CorrTable> {
    spec.validate()?;
    let n = ds.stations().len();
    if n < 2 {
        return Err(Error::Data("correlation analysis needs at least two stations".into()));
    }
    let total = n * (n - 1) / 2;
    let pair = |k: usize| {
        // Row-major enumeration of i < j.
        let mut i = 0;
        let mut k = k;
        while k >= n - 1 - i {
            k -= n - 1 - i;
            i += 1;
        }
        (i, i + 1 + k)
    };
    let mut chosen: Vec<usize> = if n_pairs >= total {
        (0..total).collect()
    } else {
        sample(&mut rng_for(seed, "corr-pairs"), total, n_pairs).into_vec()
    };
    chosen.sort_unstable();
    let bands = spec.band_names();
    let mut cache: HashMap<(usize, i64, usize), Vec<Vec<f64>>> = HashMap::new();
    let mut components = |idx: usize, start: i64, len: usize| -> Result<Vec<Vec<f64>>> {
        if let Some(c) = cache.get(&(idx, start, len)) {
            return Ok(c.clone());
        }
        let t = &ds.tables[idx];
        let rows = t.contiguous(start, len).expect("common run is present");
        let x: Vec<f64> = t.values[rows].iter().map(|r| r[TARGET]).collect();
        let c = (0..spec.n_bands())
            .map(|b| band_component(&x, spec, b))
            .collect::<Result<Vec<_>>>()?;
        cache.insert((idx, start, len), c.clone());
        Ok(c)
    };
    let mut rows = Vec::new();
    let mut skipped = 0;
    for k in chosen {
        let (i, j) = pair(k);
        let (start, run) = common_run(&ds.tables[i].hours, &ds.tables[j].hours);
        // Keep the latest whole number of wavelet blocks.
        let len = run - run % spec.block();
        if len < MIN_OVERLAP {
            skipped += 1;
            continue;
        }
        let start = start + (run - len) as i64;
        let (ca, cb) = (components(i, start, len)?, components(j, start, len)?);
        let rs: Option<Vec<f64>> = ca.iter().zip(&cb).map(|(a, b)| pearson(a, b)).collect();
        let Some(rs) = rs else {
            skipped += 1;
            continue;
        };
        let (sa, sb) = (&ds.stations()[i], &ds.stations()[j]);
        let d = haversine(sa, sb);
        for (band, r) in bands.iter().zip(rs) {
            rows.push(CorrRow {
                station_a: sa.id.clone(),
                station_b: sb.id.clone(),
                distance_km: d,
                band: band.clone(),
                r,
            });
        }
    }
    Ok(CorrTable { bands, rows, skipped })
}

impl CorrTable {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Mean correlation of `band` per distance bin of width `bin_km`, as
    /// `(bin center, mean r, pairs)` for non-empty bins.
    pub fn binned(&self, band: &str, bin_km: f64) -> Vec<(f64, f64, usize)> {
        let mut bins: std::collections::BTreeMap<u64, (f64, usize)> = Default::default();
        for r in self.rows.iter().filter(|r| r.band == band) {
            let e = bins.entry((r.distance_km / bin_km) as u64).or_default();
            e.0 += r.r;
            e.1 += 1;
        }
        bins.into_iter()
            .map(|(b, (s, n))| ((b as f64 + 0.5) * bin_km, s / n as f64, n))
            .collect()
    }

    /// Distance at which the binned mean correlation of `band` first falls
    /// below `level`, interpolated linearly between bin centers from
    /// `r = 1` at zero distance. `None` if it never does.
    pub fn crossing_distance(&self, band: &str, bin_km: f64, level: f64) -> Option<f64> {
        let mut prev = (0.0, 1.0);
        for (d, r, _) in self.binned(band, bin_km) {
            if r < level {
                let t = (prev.1 - level) / (prev.1 - r);
                return Some(prev.0 + t * (d - prev.0));
            }
            prev = (d, r);
        }
        None
    }

    pub fn max_distance(&self) -> f64 {
        self.rows.iter().map(|r| r.distance_km).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Registry, Station, StationTable, SynthConfig, N_VARS};
    use crate::multires::WaveletFamily;
    use rand_distr::{Distribution, StandardNormal};

    fn noise_dataset(n: usize, len: usize, seed: u64) -> Dataset {
        let mut rng = rng_for(seed, "white");
        let stations = (0..n)
            .map(|i| Station::new(format!("W{i:03}"), 40.0 + i as f64 * 0.1, -120.0, 0.0).unwrap())
            .collect();
        let tables = (0..n)
            .map(|_| StationTable {
                hours: (0..len as i64).collect(),
                values: (0..len)
                    .map(|_| {
                        let mut r = [0.0; N_VARS];
                        r[TARGET] = 50.0 + 5.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
                        r
                    })
                    .collect(),
            })
            .collect();
        Dataset::new(Registry::new(stations).unwrap(), tables).unwrap()
    }

    #[test]
    fn a_station_correlates_perfectly_with_itself() {
        let ds = noise_dataset(1, 256, 0);
        let spec = BandSpec::default();
        let x = ds.tables[0].column(TARGET);
        for b in 0..spec.n_bands() {
            let c = band_component(&x, &spec, b).unwrap();
            assert!((pearson(&c, &c).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pearson_against_direct_formula() {
        let a = [1.0, 2.0, 4.0, 7.0, 11.0];
        let b = [2.0, 1.0, 5.0, 6.0, 13.0];
        let (ma, mb) = (5.0, 5.4);
        let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let da: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>().sqrt();
        let db: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum::<f64>().sqrt();
        assert!((pearson(&a, &b).unwrap() - num / (da * db)).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), None);
    }

    #[test]
    fn independent_noise_is_uncorrelated() {
        let ds = noise_dataset(16, 1024, 1);
        let t = corr_vs_distance(&ds, &BandSpec::default(), 100, 1).unwrap();
        assert_eq!(t.skipped, 0);
        assert_eq!(t.rows.len(), 100 * t.bands.len());
        for band in &t.bands {
            let rs: Vec<f64> = t.rows.iter().filter(|r| &r.band == band).map(|r| r.r.abs()).collect();
            let mean = rs.iter().sum::<f64>() / rs.len() as f64;
            assert!(mean < 0.1, "{band}: {mean}");
        }
    }

    #[test]
    fn short_overlaps_are_skipped() {
        let mut ds = noise_dataset(3, 256, 2);
        ds.tables[2].hours = (1000..1256).collect();
        let t = corr_vs_distance(&ds, &BandSpec::default(), 10, 0).unwrap();
        assert_eq!(t.skipped, 2);
        assert_eq!(t.rows.len(), t.bands.len());
    }

    #[test]
    fn common_run_finds_the_longest_shared_stretch() {
        let a = [1, 2, 3, 4, 10, 11, 12, 13, 14, 15];
        let b = [2, 3, 4, 5, 11, 12, 13, 14, 20];
        assert_eq!(common_run(&a, &b), (11, 4));
        assert_eq!(common_run(&a, &[]), (0, 0));
    }

    #[test]
    fn crossing_interpolates_between_bins() {
        let row = |d: f64, r: f64| CorrRow {
            station_a: "a".into(),
            station_b: "b".into(),
            distance_km: d,
            band: "x".into(),
            r,
        };
        let t = CorrTable {
            bands: vec!["x".into()],
            rows: vec![row(10.0, 0.9), row(30.0, 0.7), row(110.0, 0.3)],
            skipped: 0,
        };
        // Bins of 100 km: centers 50 (mean 0.8) and 150 (0.3).
        let d = t.crossing_distance("x", 100.0, 0.5).unwrap();
        assert!((d - (50.0 + 0.6 * 100.0)).abs() < 1e-9);
        assert_eq!(t.crossing_distance("x", 100.0, 0.2), None);
    }

    #[test]
    fn synthetic_slow_band_decorrelates_farther_than_the_fast_band() {
        let ds = generate_synthetic(&SynthConfig { hours: 512, ..SynthConfig::with_seed(3) }).unwrap();
        let spec = BandSpec::new(3, WaveletFamily::Haar).unwrap();
        let t = corr_vs_distance(&ds, &spec, 400, 3).unwrap();
        let fast = t.crossing_distance(&t.bands[0], 25.0, 0.5).unwrap();
        let slow = t
            .crossing_distance(&t.bands[2], 25.0, 0.5)
            .unwrap_or(t.max_distance());
        assert!(slow >= 2.0 * fast, "slow {slow} fast {fast}");
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("station_a,station_b,distance_km,band,r\n"));
        assert_eq!(text.lines().count(), t.rows.len() + 1);
    }
}
