//! Synthetic station network with band-dependent spatial correlation.
//!
//! Each band's temperature component is a sum of `modes` sinusoids whose
//! spatial amplitudes are Gaussian random fields with a squared-exponential
//! kernel of that band's length-scale. A uniform westerly flow delays every
//! station by its eastward offset divided by the advection speed, so upwind
//! stations lead downwind ones.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Record, StationTable, N_VARS};
use super::station::{Registry, Station};
use crate::error::{Error, Result};
use crate::retrieval::{haversine, EARTH_RADIUS_KM};
use crate::rng::rng_for;

pub const MAX_STATIONS: usize = 256;
/// 2020-01-01T00:00Z in epoch hours.
pub const DEFAULT_START_HOUR: i64 = 438_288;

/// Per-band parameter triple, slowest band first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandTriple {
    pub slow: f64,
    pub moderate: f64,
    pub fast: f64,
}

impl BandTriple {
    pub fn as_array(&self) -> [f64; 3] {
        [self.slow, self.moderate, self.fast]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Grid columns (longitude) and rows (latitude).
    pub grid: (usize, usize),
    /// `[lat_min, lat_max, lon_min, lon_max]` in degrees.
    pub bbox: [f64; 4],
    pub rho_km: BandTriple,
    pub period_hours: BandTriple,
    /// Standard deviation of each band component, °F.
    pub amplitude: BandTriple,
    pub noise_std: f64,
    pub hours: usize,
    pub start_hour: i64,
    pub modes: usize,
    /// Relative spread of mode frequencies around each band's base frequency.
    pub freq_jitter: f64,
    /// Eastward transport speed; zero disables the delay.
    pub advection_kmh: f64,
    pub elevation_rho_km: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grid: (10, 8),
            bbox: [44.0, 48.75, -124.0, -120.24],
            rho_km: BandTriple {
                slow: 500.0,
                moderate: 100.0,
                fast: 25.0,
            },
            period_hours: BandTriple {
                slow: 48.0,
                moderate: 6.0,
                fast: 3.0,
            },
            amplitude: BandTriple {
                slow: 6.0,
                moderate: 2.5,
                fast: 1.5,
            },
            noise_std: 1.0,
            hours: 1440,
            start_hour: DEFAULT_START_HOUR,
            modes: 32,
            freq_jitter: 0.2,
            advection_kmh: 60.0,
            elevation_rho_km: 100.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn n_stations(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let r = self.rho_km;
        if !(r.slow > r.moderate && r.moderate > r.fast && r.fast > 0.0) {
            return bad(format!(
                "length-scales must satisfy slow > moderate > fast > 0, got {} / {} / {}",
                r.slow, r.moderate, r.fast
            ));
        }
        let n = self.n_stations();
        if n == 0 || n > MAX_STATIONS {
            return bad(format!("grid holds {n} stations; allowed 1..={MAX_STATIONS}"));
        }
        let [lat0, lat1, lon0, lon1] = self.bbox;
        if !(-90.0..=90.0).contains(&lat0) || !(-90.0..=90.0).contains(&lat1) || lat0 >= lat1 {
            return bad(format!("invalid latitude range {lat0}..{lat1}"));
        }
        if !(-180.0..=180.0).contains(&lon0) || !(-180.0..=180.0).contains(&lon1) || lon0 >= lon1
        {
            return bad(format!("invalid longitude range {lon0}..{lon1}"));
        }
        if self.period_hours.as_array().iter().any(|p| !(*p > 0.0)) {
            return bad("periods must be positive".into());
        }
        if self.amplitude.as_array().iter().any(|a| !(*a >= 0.0)) {
            return bad("amplitudes must be non-negative".into());
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return bad(format!("noise_std {} must be finite and >= 0", self.noise_std));
        }
        if self.hours == 0 || self.modes == 0 {
            return bad("hours and modes must be positive".into());
        }
        if !(self.freq_jitter >= 0.0 && self.freq_jitter < 1.0) {
            return bad(format!("freq_jitter {} outside [0, 1)", self.freq_jitter));
        }
        if !(self.advection_kmh >= 0.0) || !self.advection_kmh.is_finite() {
            return bad("advection_kmh must be finite and >= 0".into());
        }
        if !(self.elevation_rho_km > 0.0) {
            return bad("elevation_rho_km must be positive".into());
        }
        Ok(())
    }
}

/// Generated dataset plus the noise-free band components of `t2m`.
#[derive(Debug, Clone)]
pub struct SyntheticField {
    pub dataset: Dataset,
    /// `components[station][band]`, bands ordered slow, moderate, fast.
    pub components: Vec<[Vec<f64>; 3]>,
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    Ok(synthesize(cfg)?.dataset)
}

/// Lower Cholesky factor of the squared-exponential kernel, adding diagonal
/// jitter until the factorization succeeds.
fn kernel_factor(dist: &DMatrix<f64>, rho: f64) -> Result<DMatrix<f64>> {
    let n = dist.nrows();
    let k = dist.map(|d| (-d * d / (2.0 * rho * rho)).exp());
    let mut jitter = 1e-10;
    while jitter <= 1e-2 {
        let m = &k + DMatrix::identity(n, n) * jitter;
        if let Some(ch) = m.cholesky() {
            return Ok(ch.l());
        }
        jitter *= 10.0;
    }
    Err(Error::Config(format!(
        "spatial kernel with length-scale {rho} km is not positive definite"
    )))
}

fn sample_field<R: Rng>(l: &DMatrix<f64>, rng: &mut R) -> Vec<f64> {
    let z: Vec<f64> = (0..l.ncols()).map(|_| rng.sample(StandardNormal)).collect();
    (0..l.nrows())
        .map(|i| (0..=i).map(|j| l[(i, j)] * z[j]).sum())
        .collect()
}

pub fn synthesize(cfg: &SynthConfig) -> Result<SyntheticField> {
    cfg.validate()?;
    let (cols, rows) = cfg.grid;
    let [lat0, lat1, lon0, lon1] = cfg.bbox;
    let lat_c = 0.5 * (lat0 + lat1);
    let lon_c = 0.5 * (lon0 + lon1);

    let mut layout = rng_for(cfg.seed, "synth/layout");
    let mut coords = Vec::with_capacity(cfg.n_stations());
    for i in 0..cols {
        for j in 0..rows {
            let u: f64 = layout.random_range(0.2..0.8);
            let v: f64 = layout.random_range(0.2..0.8);
            let lon = lon0 + (i as f64 + u) * (lon1 - lon0) / cols as f64;
            let lat = lat0 + (j as f64 + v) * (lat1 - lat0) / rows as f64;
            coords.push((lat, lon));
        }
    }
    let probes: Vec<Station> = coords
        .iter()
        .map(|&(lat, lon)| Station::new("probe", lat, lon, 0.0))
        .collect::<Result<_>>()?;
    let n = probes.len();
    let dist = DMatrix::from_fn(n, n, |i, j| haversine(&probes[i], &probes[j]));

    let mut fields = rng_for(cfg.seed, "synth/fields");
    let elev_l = kernel_factor(&dist, cfg.elevation_rho_km)?;
    let elevation: Vec<f64> = sample_field(&elev_l, &mut fields)
        .into_iter()
        .map(|z| (700.0 + 450.0 * z).max(0.0))
        .collect();

    let km_per_deg_lon = EARTH_RADIUS_KM * lat_c.to_radians().cos() * std::f64::consts::PI / 180.0;
    let delay: Vec<f64> = coords
        .iter()
        .map(|&(_, lon)| {
            if cfg.advection_kmh > 0.0 {
                (lon - lon_c) * km_per_deg_lon / cfg.advection_kmh
            } else {
                0.0
            }
        })
        .collect();

    let rho = cfg.rho_km.as_array();
    let period = cfg.period_hours.as_array();
    let amp = cfg.amplitude.as_array();
    let mut freqs = rng_for(cfg.seed, "synth/frequencies");
    let scale = (1.0 / cfg.modes as f64).sqrt();
    let mut components: Vec<[Vec<f64>; 3]> = (0..n)
        .map(|_| std::array::from_fn(|_| vec![0.0; cfg.hours]))
        .collect();
    for b in 0..3 {
        let l = kernel_factor(&dist, rho[b])?;
        let base = 2.0 * std::f64::consts::PI / period[b];
        for _ in 0..cfg.modes {
            let z: f64 = freqs.sample(StandardNormal);
            let omega = base * (1.0 + cfg.freq_jitter * z);
            let a = sample_field(&l, &mut fields);
            let bb = sample_field(&l, &mut fields);
            for s in 0..n {
                let (ca, cb) = (amp[b] * scale * a[s], amp[b] * scale * bb[s]);
                let series = &mut components[s][b];
                // Rotate (cos, sin) by a fixed step instead of calling trig per hour.
                let (step_s, step_c) = omega.sin_cos();
                let (mut sn, mut cs) = (-omega * delay[s]).sin_cos();
                for (t, out) in series.iter_mut().enumerate() {
                    if t % 64 == 0 {
                        (sn, cs) = (omega * (t as f64 - delay[s])).sin_cos();
                    }
                    *out += ca * cs + cb * sn;
                    (sn, cs) = (sn * step_c + cs * step_s, cs * step_c - sn * step_s);
                }
            }
        }
    }

    let mut noise = rng_for(cfg.seed, "synth/noise");
    let mut gauss = |sd: f64| -> f64 {
        let z: f64 = noise.sample(StandardNormal);
        sd * z
    };
    let wind_ms = cfg.advection_kmh / 3.6;
    let unit = |b: usize, x: f64| if amp[b] > 0.0 { x / amp[b] } else { 0.0 };
    let mut stations = Vec::with_capacity(n);
    let mut tables = Vec::with_capacity(n);
    for s in 0..n {
        let (lat, lon) = coords[s];
        let elev = elevation[s];
        stations.push(Station::new(format!("ST{s:03}"), lat, lon, elev)?);
        let t_base = 50.0 - 0.0117 * elev - 1.5 * (lat - lat_c);
        let d_base = t_base - 8.0;
        let p_base = 1013.25 * (-elev / 8434.0).exp();
        let mut values: Vec<Record> = Vec::with_capacity(cfg.hours);
        for t in 0..cfg.hours {
            let [cs, cm, cf] = [
                components[s][0][t],
                components[s][1][t],
                components[s][2][t],
            ];
            let mut r = [0.0; N_VARS];
            r[0] = wind_ms + 0.5 * unit(0, cs) + gauss(0.5);
            r[1] = 0.8 * unit(1, cm) + gauss(0.5);
            r[2] = t_base + cs + cm + cf + gauss(cfg.noise_std);
            r[3] = d_base + 0.8 * cs + 0.5 * cm + gauss(cfg.noise_std);
            r[4] = p_base - 2.0 * unit(0, cs) + gauss(0.5);
            values.push(r);
        }
        tables.push(StationTable {
            hours: (0..cfg.hours as i64).map(|t| cfg.start_hour + t).collect(),
            values,
        });
    }
    // Station ids follow grid order, so the registry keeps this order.
    let dataset = Dataset::new(Registry::new(stations)?, tables)?;
    Ok(SyntheticField {
        dataset,
        components,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma).powi(2);
            sbb += (y - mb).powi(2);
        }
        sab / (saa * sbb).sqrt()
    }

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            hours: 480,
            ..SynthConfig::with_seed(seed)
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_synthetic(&small(3)).unwrap();
        let b = generate_synthetic(&small(3)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&small(4)).unwrap();
        assert_ne!(a.tables, c.tables);
    }

    #[test]
    fn length_scale_ordering_is_enforced() {
        assert!(SynthConfig::default().validate().is_ok());
        let mut cfg = SynthConfig::default();
        cfg.rho_km.fast = 200.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.rho_km = BandTriple {
            slow: 1e6,
            moderate: 1e5,
            fast: 1e4,
        };
        assert!(cfg.validate().is_ok());
        let big = SynthConfig {
            grid: (20, 20),
            ..SynthConfig::default()
        };
        assert!(big.validate().is_err());
    }

    #[test]
    fn components_sum_into_temperature() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            ..small(1)
        };
        let f = synthesize(&cfg).unwrap();
        let st = &f.dataset.stations()[7];
        let t_base = 50.0 - 0.0117 * st.elevation - 1.5 * (st.lat - 0.5 * (44.0 + 48.75));
        let table = &f.dataset.tables[7];
        for t in [0, 17, 300] {
            let c = &f.components[7];
            let expect = t_base + c[0][t] + c[1][t] + c[2][t];
            assert!((table.values[t][2] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn incremental_rotation_matches_direct_trig() {
        let cfg = SynthConfig {
            modes: 1,
            freq_jitter: 0.0,
            ..small(2)
        };
        let f = synthesize(&cfg).unwrap();
        // A single unjittered mode is a pure sinusoid, so
        // c(t+1) + c(t-1) = 2 cos(omega) c(t) exactly.
        for b in 0..3 {
            let omega = 2.0 * std::f64::consts::PI / cfg.period_hours.as_array()[b];
            let c = &f.components[11][b];
            for t in 1..cfg.hours - 1 {
                let lhs = c[t + 1] + c[t - 1];
                assert!((lhs - 2.0 * omega.cos() * c[t]).abs() < 1e-9, "band {b} t {t}");
            }
        }
    }

    #[test]
    fn slow_component_correlates_more_than_fast_at_50km() {
        let f = synthesize(&SynthConfig::default()).unwrap();
        let st = f.dataset.stations();
        let (mut slow, mut fast, mut pairs) = (0.0, 0.0, 0);
        for i in 0..st.len() {
            for j in i + 1..st.len() {
                let d = haversine(&st[i], &st[j]);
                if (40.0..60.0).contains(&d) {
                    slow += pearson(&f.components[i][0], &f.components[j][0]);
                    fast += pearson(&f.components[i][2], &f.components[j][2]);
                    pairs += 1;
                }
            }
        }
        assert!(pairs >= 20, "only {pairs} pairs near 50 km");
        assert!(slow / pairs as f64 > fast / pairs as f64);
    }

    #[test]
    fn band_correlation_decays_with_distance() {
        let edges = [0.0, 50.0, 100.0, 150.0, 200.0, 300.0, 400.0];
        let nb = edges.len() - 1;
        let mut sum = vec![[0.0f64; 3]; nb];
        let mut cnt = vec![0usize; nb];
        for seed in 0..3 {
            let f = synthesize(&small(seed)).unwrap();
            let st = f.dataset.stations();
            for i in 0..st.len() {
                for j in i + 1..st.len() {
                    let d = haversine(&st[i], &st[j]);
                    let Some(k) = (0..nb).find(|&k| d >= edges[k] && d < edges[k + 1]) else {
                        continue;
                    };
                    for b in 0..3 {
                        sum[k][b] += pearson(&f.components[i][b], &f.components[j][b]);
                    }
                    cnt[k] += 1;
                }
            }
        }
        let mean: Vec<[f64; 3]> = sum
            .iter()
            .zip(&cnt)
            .map(|(s, &c)| s.map(|v| v / c as f64))
            .collect();
        for k in 0..nb {
            assert!(cnt[k] >= 20);
            if edges[k] >= 50.0 {
                assert!(mean[k][0] >= mean[k][2], "bin {k}: {:?}", mean[k]);
            }
            if k > 0 {
                for b in 0..3 {
                    // Sampling noise over a few hundred pairs.
                    assert!(mean[k][b] <= mean[k - 1][b] + 0.1, "band {b} bin {k}: {mean:?}");
                }
            }
        }
    }
}
