//! The TOML run configuration and the dataset and split it resolves to.

use std::path::{Path, PathBuf};

use rarf::data::{generate_synthetic, ingest_csv, CsvSchema, Dataset, SplitSpec, SynthConfig, TemperatureUnit};
use rarf::eval::EvalOptions;
use rarf::model::ModelConfig;
use rarf::rng::sha256_hex;
use rarf::train::TrainConfig;
use rarf::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    /// A directory written by `gen-synth` or `ingest`; `path` names its
    /// `manifest.json`.
    Dataset,
    /// A long-format CSV file.
    Csv,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub temperature_unit: TemperatureUnit,
}

/// Either explicit station lists or a seeded random draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub n_val: usize,
    pub n_test: usize,
    pub fractions: [f64; 3],
    pub train_station_ids: Option<Vec<String>>,
    pub val_station_ids: Option<Vec<String>>,
    pub test_station_ids: Option<Vec<String>>,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            n_val: 8,
            n_test: 8,
            fractions: [0.7, 0.1, 0.2],
            train_station_ids: None,
            val_station_ids: None,
            test_station_ids: None,
        }
    }
}

/// One `seed` drives every subsystem: it replaces the seeds inside the
/// `synth` and `train` sections, and each subsystem derives its own stream
/// from it by label.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub synth: SynthConfig,
    pub split: SplitSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().replace('\n', " ")))?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
        }
    }

    /// Applies a seed override and pushes the run seed into subsystems.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.source == DataSource::Synthetic {
            self.synth.validate()?;
        } else if self.data.path.is_none() {
            return Err(Error::Config("data.path is required for this source".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.stride == 0 {
            return Err(Error::Config("eval.stride must be positive".into()));
        }
        if !(self.eval.coverage_level > 0.0 && self.eval.coverage_level < 1.0) {
            return Err(Error::Config("eval.coverage_level must lie in (0, 1)".into()));
        }
        let s = &self.split;
        let explicit = [&s.train_station_ids, &s.val_station_ids, &s.test_station_ids];
        let given = explicit.iter().filter(|x| x.is_some()).count();
        if given != 0 && given != 3 {
            return Err(Error::Config("give all three station lists or none".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, so formatting and comments in
    /// the file do not matter.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match self.data.source {
            DataSource::Synthetic => generate_synthetic(&self.synth),
            DataSource::Dataset => Dataset::load(self.data.path.as_deref().expect("validated")),
            DataSource::Csv => ingest_csv(
                self.data.path.as_deref().expect("validated"),
                &CsvSchema {
                    temperature_unit: self.data.temperature_unit,
                },
            ),
        }
    }

    pub fn split(&self, ds: &Dataset) -> Result<SplitSpec> {
        let s = &self.split;
        let spec = match (&s.train_station_ids, &s.val_station_ids, &s.test_station_ids) {
            (Some(tr), Some(va), Some(te)) => SplitSpec {
                train_station_ids: tr.clone(),
                val_station_ids: va.clone(),
                test_station_ids: te.clone(),
                fractions: s.fractions,
            },
            _ => SplitSpec::random(&ds.registry, s.n_val, s.n_test, s.fractions, self.seed)?,
        };
        spec.validate()?;
        spec.check_registry(&ds.registry)?;
        Ok(spec)
    }

    /// Dataset with normalization statistics fit on the train stations over
    /// the train period.
    pub fn prepared(&self) -> Result<(Dataset, SplitSpec)> {
        let mut ds = self.dataset()?;
        let split = self.split(&ds)?;
        let span = ds.hour_span().ok_or_else(|| Error::Data("dataset is empty".into()))?;
        let p = split.periods(span);
        ds.norm_stats = Some(ds.compute_norm_stats(&split.train_station_ids, p.train)?);
        Ok((ds, split))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default_config() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["sed = 1", "[model]\nlxx = 3", "[synth]\nrho = 1", "[bogus]"] {
            let e = RunConfig::from_toml(text).unwrap_err();
            assert_eq!(e.category(), "config", "{text}");
        }
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c = RunConfig::from_toml("seed = 3\n[model]\nlx = 48\nhighway_contexts = [48, 0]\n[train.phase1]\nepochs = 2\nlr = 0.01\n").unwrap();
        assert_eq!(c.model.lx, 48);
        assert_eq!(c.model.ly, ModelConfig::default().ly);
        assert_eq!(c.train.phase1.epochs, 2);
        let r = c.resolve(Some(9)).unwrap();
        assert_eq!((r.seed, r.synth.seed, r.train.seed), (9, 9, 9));
    }

    #[test]
    fn digest_tracks_content_not_layout() {
        let a = RunConfig::from_toml("seed = 1\n[model]\nlx = 48\n").unwrap();
        let b = RunConfig::from_toml("# comment\n[model]\nlx   =   48\n\n[data]\nsource = 'synthetic'\n").unwrap();
        let b = RunConfig { seed: 1, ..b };
        assert_eq!(a.digest(), b.digest());
        let c = RunConfig::from_toml("seed = 1\n[model]\nlx = 96\n").unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn validation_happens_before_work() {
        let c = RunConfig::from_toml("[data]\nsource = 'csv'\n").unwrap();
        assert!(c.resolve(None).is_err());
        let c = RunConfig::from_toml("[model.retrieval]\nks = [50, 25, 10]\n").unwrap();
        assert_eq!(c.resolve(None).unwrap_err().category(), "config");
        let c = RunConfig::from_toml("[split]\ntest_station_ids = ['ST000']\n").unwrap();
        assert!(c.resolve(None).is_err());
    }
}
