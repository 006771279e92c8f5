use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A measurement location and the unit of retrieval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: String,
    /// Degrees north, in `[-90, 90]`.
    pub lat: f64,
    /// Degrees east, in `[-180, 180]`.
    pub lon: f64,
    /// Meters above sea level.
    pub elevation: f64,
}

impl Station {
    pub fn new(id: impl Into<String>, lat: f64, lon: f64, elevation: f64) -> Result<Self> {
        let station = Self {
            id: id.into(),
            lat,
            lon,
            elevation,
        };
        station.validate()?;
        Ok(station)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Data("station id is empty".into()));
        }
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err(Error::Data(format!(
                "station {}: latitude {} outside [-90, 90]",
                self.id, self.lat
            )));
        }
        if !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::Data(format!(
                "station {}: longitude {} outside [-180, 180]",
                self.id, self.lon
            )));
        }
        if !self.elevation.is_finite() {
            return Err(Error::Data(format!(
                "station {}: elevation is not finite",
                self.id
            )));
        }
        Ok(())
    }
}

/// Stations with unique ids, kept sorted by id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Station>", try_from = "Vec<Station>")]
pub struct Registry {
    stations: Vec<Station>,
    index: BTreeMap<String, usize>,
}

impl Registry {
    pub fn new(stations: Vec<Station>) -> Result<Self> {
        let mut stations = stations;
        stations.sort_by(|a, b| a.id.cmp(&b.id));
        let mut index = BTreeMap::new();
        for (i, st) in stations.iter().enumerate() {
            st.validate()?;
            if index.insert(st.id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate station id {}", st.id)));
            }
        }
        Ok(Self { stations, index })
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    pub fn stations(&self) -> &[Station] {
        &self.stations
    }

    pub fn get(&self, id: &str) -> Option<&Station> {
        self.index.get(id).map(|&i| &self.stations[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn require(&self, id: &str) -> Result<&Station> {
        self.get(id)
            .ok_or_else(|| Error::Data(format!("unknown station {id}")))
    }

    /// Registry restricted to the given ids (unknown ids are errors).
    pub fn subset<S: AsRef<str>>(&self, ids: &[S]) -> Result<Registry> {
        let stations = ids
            .iter()
            .map(|id| self.require(id.as_ref()).cloned())
            .collect::<Result<Vec<_>>>()?;
        Registry::new(stations)
    }
}

impl From<Registry> for Vec<Station> {
    fn from(r: Registry) -> Self {
        r.stations
    }
}

impl TryFrom<Vec<Station>> for Registry {
    type Error = Error;

    fn try_from(v: Vec<Station>) -> Result<Self> {
        Registry::new(v)
    }
}
