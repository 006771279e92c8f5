//! Decimated orthonormal multilevel DWT with periodic boundaries.
//!
//! Level `j` splits the current approximation into a half-length
//! approximation and a half-length detail, so for an `N`-sample input and
//! `J` levels the coefficient lengths are `N/2, N/4, ..., N/2^J` for the
//! details plus `N/2^J` for the final approximation. The transform is
//! orthonormal: coefficient energy equals signal energy.
//!
//! Bands group coefficients for retrieval. The finest details form the
//! fastest band; the coarsest detail and the approximation together form
//! the slowest band. With `J = 3` that gives exactly three bands:
//! fast = `d1`, moderate = `d2`, slow = `{d3, a3}`.

use std::collections::BTreeMap;
use std::f64::consts::SQRT_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WaveletFamily {
    #[default]
    Haar,
    Db2,
}

impl WaveletFamily {
    /// Orthonormal low-pass analysis filter.
    pub fn lowpass(self) -> Vec<f64> {
        match self {
            WaveletFamily::Haar => vec![1.0 / SQRT_2, 1.0 / SQRT_2],
            WaveletFamily::Db2 => {
                let s3 = 3f64.sqrt();
                let norm = 4.0 * SQRT_2;
                vec![
                    (1.0 + s3) / norm,
                    (3.0 + s3) / norm,
                    (3.0 - s3) / norm,
                    (1.0 - s3) / norm,
                ]
            }
        }
    }

    /// Quadrature-mirror high-pass filter, `g[n] = (-1)^n h[L-1-n]`.
    pub fn highpass(self) -> Vec<f64> {
        let h = self.lowpass();
        let len = h.len();
        (0..len)
            .map(|n| {
                let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
                sign * h[len - 1 - n]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryMode {
    #[default]
    Periodic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandSpec {
    pub levels: usize,
    #[serde(default)]
    pub family: WaveletFamily,
    #[serde(default)]
    pub boundary: BoundaryMode,
}

impl Default for BandSpec {
    fn default() -> Self {
        Self {
            levels: 3,
            family: WaveletFamily::Haar,
            boundary: BoundaryMode::Periodic,
        }
    }
}

impl BandSpec {
    pub fn new(levels: usize, family: WaveletFamily) -> Result<Self> {
        let spec = Self {
            levels,
            family,
            boundary: BoundaryMode::Periodic,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Wavelet("levels must be at least 1".into()));
        }
        if self.levels > 16 {
            return Err(Error::Wavelet(format!("levels = {} is too deep", self.levels)));
        }
        Ok(())
    }

    /// Required divisor of every input length, `2^J`.
    pub fn block(&self) -> usize {
        1 << self.levels
    }

    pub fn check_len(&self, n: usize) -> Result<()> {
        self.validate()?;
        if n == 0 || n % self.block() != 0 {
            return Err(Error::Wavelet(format!(
                "length {n} must be a positive multiple of 2^{} = {}",
                self.levels,
                self.block()
            )));
        }
        Ok(())
    }

    /// Number of retrieval bands: one per detail level, with the coarsest
    /// detail sharing a band with the approximation.
    pub fn n_bands(&self) -> usize {
        self.levels
    }

    pub fn band_names(&self) -> Vec<String> {
        match self.levels {
            3 => vec!["fast".into(), "moderate".into(), "slow".into()],
            j => (1..j)
                .map(|l| format!("d{l}"))
                .chain(std::iter::once("slow".to_string()))
                .collect(),
        }
    }

    /// Coefficient sequences (`d1..dJ`, `aJ`) that make up band `band`.
    pub fn band_sequences(&self, band: usize) -> Vec<usize> {
        let j = self.levels;
        if band + 1 < j {
            vec![band]
        } else {
            vec![j - 1, j]
        }
    }

    /// Length of every coefficient sequence for an `n`-sample signal, in
    /// flattened order `d1, ..., dJ, aJ`.
    pub fn sequence_lengths(&self, n: usize) -> Result<Vec<usize>> {
        self.check_len(n)?;
        let mut lens: Vec<usize> = (1..=self.levels).map(|l| n >> l).collect();
        lens.push(n >> self.levels);
        Ok(lens)
    }

    /// Per-band time length of an `n`-sample signal (the slow band's two
    /// sequences share one length).
    pub fn band_lengths(&self, n: usize) -> Result<Vec<usize>> {
        self.check_len(n)?;
        Ok((0..self.n_bands())
            .map(|b| n >> (self.band_sequences(b)[0] + 1))
            .collect())
    }
}

/// Coefficients of one decomposed signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSet {
    /// `details[l]` holds `d_{l+1}`; finest first.
    pub details: Vec<Vec<f64>>,
    pub approx: Vec<f64>,
    pub original_len: usize,
    pub spec: BandSpec,
}

impl BandSet {
    /// Sequence `i` in flattened order `d1, ..., dJ, aJ`.
    pub fn sequence(&self, i: usize) -> &[f64] {
        if i < self.details.len() {
            &self.details[i]
        } else {
            &self.approx
        }
    }

    fn sequence_mut(&mut self, i: usize) -> &mut Vec<f64> {
        if i < self.details.len() {
            &mut self.details[i]
        } else {
            &mut self.approx
        }
    }

    /// Channels of band `band`, each a coefficient sequence of equal length.
    pub fn band(&self, band: usize) -> Vec<&[f64]> {
        self.spec
            .band_sequences(band)
            .into_iter()
            .map(|i| self.sequence(i))
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.original_len);
        for d in &self.details {
            out.extend_from_slice(d);
        }
        out.extend_from_slice(&self.approx);
        out
    }

    pub fn from_flat(flat: &[f64], spec: BandSpec) -> Result<Self> {
        let lens = spec.sequence_lengths(flat.len())?;
        let mut offset = 0;
        let mut seqs = Vec::with_capacity(lens.len());
        for len in lens {
            seqs.push(flat[offset..offset + len].to_vec());
            offset += len;
        }
        let approx = seqs.pop().unwrap_or_default();
        Ok(Self {
            details: seqs,
            approx,
            original_len: flat.len(),
            spec,
        })
    }

    /// Copy with every band except `keep` zeroed.
    pub fn only_band(&self, keep: usize) -> Self {
        let mut out = self.clone();
        let kept = self.spec.band_sequences(keep);
        for i in 0..=self.spec.levels {
            if !kept.contains(&i) {
                out.sequence_mut(i).iter_mut().for_each(|c| *c = 0.0);
            }
        }
        out
    }

    /// Named sequences, as emitted by the `decompose` command.
    pub fn to_named(&self) -> BTreeMap<String, Vec<f64>> {
        let mut map = BTreeMap::new();
        for (l, d) in self.details.iter().enumerate() {
            map.insert(format!("d{}", l + 1), d.clone());
        }
        map.insert(format!("a{}", self.spec.levels), self.approx.clone());
        map
    }

    pub fn energy(&self) -> f64 {
        self.flatten().iter().map(|c| c * c).sum()
    }
}

fn analysis_step(x: &[f64], h: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let half = n / 2;
    let mut approx = vec![0.0; half];
    let mut detail = vec![0.0; half];
    for k in 0..half {
        let mut a = 0.0;
        let mut d = 0.0;
        for (t, (&hl, &gl)) in h.iter().zip(g).enumerate() {
            let v = x[(2 * k + t) % n];
            a += hl * v;
            d += gl * v;
        }
        approx[k] = a;
        detail[k] = d;
    }
    (approx, detail)
}

fn synthesis_step(approx: &[f64], detail: &[f64], h: &[f64], g: &[f64]) -> Vec<f64> {
    let n = approx.len() * 2;
    let mut x = vec![0.0; n];
    for k in 0..approx.len() {
        for (t, (&hl, &gl)) in h.iter().zip(g).enumerate() {
            x[(2 * k + t) % n] += hl * approx[k] + gl * detail[k];
        }
    }
    x
}

/// Forward transform.
pub fn decompose(x: &[f64], spec: &BandSpec) -> Result<BandSet> {
    spec.check_len(x.len())?;
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::Wavelet(format!("non-finite sample at index {i}")));
    }
    let h = spec.family.lowpass();
    let g = spec.family.highpass();
    let mut details = Vec::with_capacity(spec.levels);
    let mut current = x.to_vec();
    for _ in 0..spec.levels {
        let (a, d) = analysis_step(&current, &h, &g);
        details.push(d);
        current = a;
    }
    Ok(BandSet {
        details,
        approx: current,
        original_len: x.len(),
        spec: *spec,
    })
}

/// Inverse transform.
pub fn reconstruct(b: &BandSet) -> Result<Vec<f64>> {
    let spec = &b.spec;
    let expected = spec.sequence_lengths(b.original_len)?;
    let actual: Vec<usize> = b
        .details
        .iter()
        .map(Vec::len)
        .chain(std::iter::once(b.approx.len()))
        .collect();
    if expected != actual {
        return Err(Error::Wavelet(format!(
            "coefficient lengths {actual:?} do not match {expected:?} for length {}",
            b.original_len
        )));
    }
    let h = spec.family.lowpass();
    let g = spec.family.highpass();
    let mut current = b.approx.clone();
    for d in b.details.iter().rev() {
        current = synthesis_step(&current, d, &h, &g);
    }
    Ok(current)
}

/// Per-sequence horizon lengths `(L/2, ..., L/2^J, L/2^J)` so that the
/// inverse transform of predicted coefficients has length `l_y`.
pub fn band_forecast_lengths(l_y: usize, spec: &BandSpec) -> Result<Vec<usize>> {
    spec.sequence_lengths(l_y)
}

/// Dense `n × n` synthesis matrix, row-major: column `c` is the inverse
/// transform of the unit vector at flattened coefficient `c`.
pub fn reconstruction_matrix(n: usize, spec: &BandSpec) -> Result<Vec<f64>> {
    spec.check_len(n)?;
    let mut m = vec![0.0; n * n];
    let mut unit = vec![0.0; n];
    for c in 0..n {
        unit[c] = 1.0;
        let col = reconstruct(&BandSet::from_flat(&unit, *spec)?)?;
        for (r, v) in col.into_iter().enumerate() {
            m[r * n + c] = v;
        }
        unit[c] = 0.0;
    }
    Ok(m)
}

/// Time-domain component of `x` carried by one band (the additive
/// multiresolution piece): reconstruct with every other band zeroed.
pub fn band_component(x: &[f64], spec: &BandSpec, band: usize) -> Result<Vec<f64>> {
    let set = decompose(x, spec)?;
    reconstruct(&set.only_band(band))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent dense analysis operator built row by row from the
    /// periodized filter taps: rows are `[d1; d2; ...; dJ; aJ]`.
    fn oracle_analysis_matrix(n: usize, spec: &BandSpec) -> Vec<Vec<f64>> {
        let h = spec.family.lowpass();
        let g = spec.family.highpass();
        // Rows of the current approximation operator in terms of x.
        let mut approx_rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let mut rows = Vec::new();
        for _ in 0..spec.levels {
            let m = approx_rows.len();
            let mut next_a = Vec::new();
            let mut dets = Vec::new();
            for k in 0..m / 2 {
                let mut ra = vec![0.0; n];
                let mut rd = vec![0.0; n];
                for t in 0..h.len() {
                    let src = &approx_rows[(2 * k + t) % m];
                    for j in 0..n {
                        ra[j] += h[t] * src[j];
                        rd[j] += g[t] * src[j];
                    }
                }
                next_a.push(ra);
                dets.push(rd);
            }
            rows.extend(dets);
            approx_rows = next_a;
        }
        rows.extend(approx_rows);
        rows
    }

    fn random_signal(n: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = crate::rng::rng_for(seed, "multires-test");
        (0..n).map(|_| rng.random_range(-5.0..5.0)).collect()
    }

    #[test]
    fn haar_level_one_matches_hand_values() {
        let spec = BandSpec::new(1, WaveletFamily::Haar).unwrap();
        let b = decompose(&[1.0, 2.0, 3.0, 4.0], &spec).unwrap();
        let r = 1.0 / SQRT_2;
        assert!((b.approx[0] - 3.0 * r).abs() < 1e-15);
        assert!((b.approx[1] - 7.0 * r).abs() < 1e-15);
        assert!((b.details[0][0] + r).abs() < 1e-15);
        assert!((b.details[0][1] + r).abs() < 1e-15);
    }

    #[test]
    fn constant_signal_has_no_detail() {
        for family in [WaveletFamily::Haar, WaveletFamily::Db2] {
            let spec = BandSpec::new(3, family).unwrap();
            let c = 2.5;
            let b = decompose(&vec![c; 96], &spec).unwrap();
            for d in &b.details {
                assert!(d.iter().all(|v| v.abs() < 1e-12), "{family:?}");
            }
            let expect = c * SQRT_2.powi(3);
            assert!(b.approx.iter().all(|v| (v - expect).abs() < 1e-12));
        }
    }

    #[test]
    fn band_lengths_for_96_samples() {
        let spec = BandSpec::default();
        let b = decompose(&random_signal(96, 1), &spec).unwrap();
        let lens: Vec<usize> = b.details.iter().map(Vec::len).collect();
        assert_eq!(lens, vec![48, 24, 12]);
        assert_eq!(b.approx.len(), 12);
        assert_eq!(spec.band_lengths(96).unwrap(), vec![48, 24, 12]);
    }

    #[test]
    fn forecast_lengths() {
        let spec = BandSpec::default();
        assert_eq!(band_forecast_lengths(48, &spec).unwrap(), vec![24, 12, 6, 6]);
        assert_eq!(band_forecast_lengths(8, &spec).unwrap(), vec![4, 2, 1, 1]);
        let err = band_forecast_lengths(50, &spec).unwrap_err();
        assert!(err.to_string().contains("multiple of 2^3"));
    }

    #[test]
    fn bad_length_is_rejected() {
        let err = decompose(&[1.0; 12], &BandSpec::default()).unwrap_err();
        assert!(matches!(err, Error::Wavelet(_)));
    }

    #[test]
    fn matches_dense_oracle() {
        for family in [WaveletFamily::Haar, WaveletFamily::Db2] {
            let spec = BandSpec::new(3, family).unwrap();
            for n in [8, 48, 96] {
                let x = random_signal(n, n as u64);
                let rows = oracle_analysis_matrix(n, &spec);
                let expect: Vec<f64> = rows
                    .iter()
                    .map(|r| r.iter().zip(&x).map(|(a, b)| a * b).sum())
                    .collect();
                let got = decompose(&x, &spec).unwrap().flatten();
                for (g, e) in got.iter().zip(&expect) {
                    assert!((g - e).abs() < 1e-12, "{family:?} n={n}");
                }
            }
        }
    }

    #[test]
    fn zero_coefficients_reconstruct_to_zero() {
        let spec = BandSpec::default();
        let b = BandSet::from_flat(&[0.0; 48], spec).unwrap();
        assert!(reconstruct(&b).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dropping_finest_detail_removes_its_energy() {
        let spec = BandSpec::default();
        let x = random_signal(96, 3);
        let mut b = decompose(&x, &spec).unwrap();
        let d1_energy: f64 = b.details[0].iter().map(|v| v * v).sum();
        b.details[0].iter_mut().for_each(|v| *v = 0.0);
        let recon = reconstruct(&b).unwrap();
        let x_energy: f64 = x.iter().map(|v| v * v).sum();
        let r_energy: f64 = recon.iter().map(|v| v * v).sum();
        assert!((x_energy - r_energy - d1_energy).abs() < 1e-9 * x_energy);
        // The removed part is exactly the finest-band component.
        let fine = band_component(&x, &spec, 0).unwrap();
        for i in 0..96 {
            assert!((x[i] - fine[i] - recon[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn length_mismatch_on_reconstruct() {
        let spec = BandSpec::default();
        let mut b = decompose(&random_signal(16, 2), &spec).unwrap();
        b.details[1].push(0.0);
        assert!(reconstruct(&b).is_err());
    }

    #[test]
    fn reconstruction_matrix_is_orthogonal() {
        let spec = BandSpec::new(3, WaveletFamily::Db2).unwrap();
        let n = 16;
        let m = reconstruction_matrix(n, &spec).unwrap();
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..n).map(|r| m[r * n + i] * m[r * n + j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn slow_band_bundles_two_sequences() {
        let spec = BandSpec::default();
        assert_eq!(spec.band_sequences(0), vec![0]);
        assert_eq!(spec.band_sequences(1), vec![1]);
        assert_eq!(spec.band_sequences(2), vec![2, 3]);
        assert_eq!(spec.band_names(), vec!["fast", "moderate", "slow"]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn linearity(
            xs in proptest::collection::vec(-10.0f64..10.0, 48),
            ys in proptest::collection::vec(-10.0f64..10.0, 48),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
        ) {
            let spec = BandSpec::new(3, WaveletFamily::Db2).unwrap();
            let mix: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| alpha * x + beta * y).collect();
            let lhs = decompose(&mix, &spec).unwrap().flatten();
            let dx = decompose(&xs, &spec).unwrap().flatten();
            let dy = decompose(&ys, &spec).unwrap().flatten();
            for i in 0..48 {
                prop_assert!((lhs[i] - (alpha * dx[i] + beta * dy[i])).abs() < 1e-9);
            }
        }

        #[test]
        fn perfect_reconstruction_and_parseval(
            xs in proptest::collection::vec(-100.0f64..100.0, 96),
            db2 in any::<bool>(),
        ) {
            let family = if db2 { WaveletFamily::Db2 } else { WaveletFamily::Haar };
            let spec = BandSpec::new(3, family).unwrap();
            let b = decompose(&xs, &spec).unwrap();
            let back = reconstruct(&b).unwrap();
            for (a, r) in xs.iter().zip(&back) {
                prop_assert!((a - r).abs() < 1e-9);
            }
            let e: f64 = xs.iter().map(|v| v * v).sum();
            prop_assert!((b.energy() - e).abs() <= 1e-9 * e.max(1e-300));
        }
    }
}
