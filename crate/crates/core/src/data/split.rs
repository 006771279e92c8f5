use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::station::Registry;
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Station roles and the temporal train/val/test fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_station_ids: Vec<String>,
    /// Zero-shot stations used for early stopping.
    pub val_station_ids: Vec<String>,
    /// Zero-shot stations used for reporting.
    pub test_station_ids: Vec<String>,
    pub fractions: [f64; 3],
}

/// Half-open epoch-hour ranges of the three temporal periods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Periods {
    pub train: (i64, i64),
    pub val: (i64, i64),
    pub test: (i64, i64),
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in self
            .train_station_ids
            .iter()
            .chain(&self.val_station_ids)
            .chain(&self.test_station_ids)
        {
            if !seen.insert(id.as_str()) {
                return Err(Error::Config(format!(
                    "station {id} appears in more than one split"
                )));
            }
        }
        if self.fractions.iter().any(|f| !(*f >= 0.0)) {
            return Err(Error::Config("split fractions must be non-negative".into()));
        }
        let total: f64 = self.fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions sum to {total}, expected 1"
            )));
        }
        Ok(())
    }

    pub fn check_registry(&self, registry: &Registry) -> Result<()> {
        for id in self
            .train_station_ids
            .iter()
            .chain(&self.val_station_ids)
            .chain(&self.test_station_ids)
        {
            registry.require(id)?;
        }
        Ok(())
    }

    /// Seeded random assignment of stations to test, val and train.
    pub fn random(
        registry: &Registry,
        n_val: usize,
        n_test: usize,
        fractions: [f64; 3],
        seed: u64,
    ) -> Result<Self> {
        if n_val + n_test >= registry.len() {
            return Err(Error::Config(format!(
                "{} stations cannot supply {n_val} val and {n_test} test stations plus training",
                registry.len()
            )));
        }
        let mut ids: Vec<String> = registry.stations().iter().map(|s| s.id.clone()).collect();
        ids.shuffle(&mut rng_for(seed, "split/stations"));
        let mut test: Vec<String> = ids[..n_test].to_vec();
        let mut val: Vec<String> = ids[n_test..n_test + n_val].to_vec();
        let mut train: Vec<String> = ids[n_test + n_val..].to_vec();
        test.sort();
        val.sort();
        train.sort();
        let spec = Self {
            train_station_ids: train,
            val_station_ids: val,
            test_station_ids: test,
            fractions,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Splits the inclusive hour span `[first, last]` by the fractions.
    pub fn periods(&self, span: (i64, i64)) -> Periods {
        let (first, last) = span;
        let total = (last - first + 1).max(0) as f64;
        let a = first + (total * self.fractions[0]).round() as i64;
        let b = first + (total * (self.fractions[0] + self.fractions[1])).round() as i64;
        Periods {
            train: (first, a),
            val: (a, b),
            test: (b, last + 1),
        }
    }
}
