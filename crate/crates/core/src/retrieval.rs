//! Station distances, top-k retrieval and resolution-aware retrieval plans.
//!
//! Retrieval is a brute-force scan: the registry is ranked against the
//! target by distance with ties broken by ascending station id, so results
//! do not depend on registry order. A plan takes nested prefixes of one
//! ranking, one prefix per band, with strictly more stations for slower
//! bands.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::{Registry, Station};
use crate::error::{Error, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Great-circle distance in kilometers between two (lat, lon) points in degrees.
pub fn haversine_deg(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

pub fn haversine(a: &Station, b: &Station) -> f64 {
    haversine_deg(a.lat, a.lon, b.lat, b.lon)
}

/// Source of location vectors for embedding-space retrieval.
pub trait LocationEmbedder {
    fn embed(&self, station: &Station) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    #[default]
    Haversine,
    EmbeddingEuclidean,
}

#[derive(Clone, Copy)]
pub enum DistanceFn<'a> {
    Haversine,
    Embedding(&'a dyn LocationEmbedder),
}

impl DistanceFn<'_> {
    pub fn kind(&self) -> DistanceKind {
        match self {
            DistanceFn::Haversine => DistanceKind::Haversine,
            DistanceFn::Embedding(_) => DistanceKind::EmbeddingEuclidean,
        }
    }

    pub fn distance(&self, a: &Station, b: &Station) -> f64 {
        match self {
            DistanceFn::Haversine => haversine(a, b),
            DistanceFn::Embedding(e) => {
                let (ea, eb) = (e.embed(a), e.embed(b));
                ea.iter()
                    .zip(&eb)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    /// Distance under the plan's distance function (kilometers for haversine).
    pub distance_km: f64,
}

fn by_distance_then_id(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance_km
        .total_cmp(&b.distance_km)
        .then_with(|| a.id.cmp(&b.id))
}

/// Every registry station except the target, nearest first.
pub fn rank(target: &Station, registry: &Registry, d: DistanceFn<'_>) -> Vec<Neighbor> {
    let mut out: Vec<Neighbor> = registry
        .stations()
        .iter()
        .filter(|s| s.id != target.id)
        .map(|s| Neighbor {
            id: s.id.clone(),
            distance_km: d.distance(target, s),
        })
        .collect();
    out.sort_by(by_distance_then_id);
    out
}

/// The `k` nearest stations to `target`, excluding the target itself.
pub fn retrieve(
    target: &Station,
    registry: &Registry,
    k: usize,
    d: DistanceFn<'_>,
) -> Result<Vec<Neighbor>> {
    let mut ranked = rank(target, registry, d);
    if k > ranked.len() {
        return Err(Error::Retrieval(format!(
            "k = {k} exceeds the {} stations available for {}",
            ranked.len(),
            target.id
        )));
    }
    ranked.truncate(k);
    Ok(ranked)
}

/// Per-band retrieval sizes, fastest band first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    pub ks: Vec<usize>,
    #[serde(default)]
    pub distance: DistanceKind,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            ks: vec![10, 25, 50],
            distance: DistanceKind::Haversine,
        }
    }
}

impl RetrievalConfig {
    pub fn new(ks: Vec<usize>) -> Result<Self> {
        let cfg = Self {
            ks,
            distance: DistanceKind::Haversine,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sizes must be positive and strictly increase from fast to slow.
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() {
            return Err(Error::Config("retrieval needs at least one band size".into()));
        }
        if self.ks[0] == 0 {
            return Err(Error::Config("retrieval sizes must be positive".into()));
        }
        if let Some(w) = self.ks.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "retrieval sizes {:?} must strictly increase from fast to slow bands \
                 ({} is not below {})",
                self.ks, w[0], w[1]
            )));
        }
        Ok(())
    }

    pub fn largest(&self) -> usize {
        *self.ks.last().expect("validated non-empty")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandRetrieval {
    pub band: String,
    pub stations: Vec<Neighbor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalPlan {
    pub target: String,
    pub bands: Vec<BandRetrieval>,
}

impl RetrievalPlan {
    pub fn sizes(&self) -> Vec<usize> {
        self.bands.iter().map(|b| b.stations.len()).collect()
    }

    /// Builds the nested per-band lists from one ranking.
    pub fn from_ranking(
        target: &str,
        ranking: &[Neighbor],
        cfg: &RetrievalConfig,
        band_names: &[String],
    ) -> Result<Self> {
        cfg.validate()?;
        if band_names.len() != cfg.ks.len() {
            return Err(Error::Config(format!(
                "{} bands but {} retrieval sizes",
                band_names.len(),
                cfg.ks.len()
            )));
        }
        if cfg.largest() > ranking.len() {
            return Err(Error::Retrieval(format!(
                "slowest band needs {} stations but only {} are available for {target}",
                cfg.largest(),
                ranking.len()
            )));
        }
        let bands = band_names
            .iter()
            .zip(&cfg.ks)
            .map(|(name, &k)| BandRetrieval {
                band: name.clone(),
                stations: ranking[..k].to_vec(),
            })
            .collect();
        Ok(Self {
            target: target.to_string(),
            bands,
        })
    }
}

pub fn plan_retrieval(
    target: &Station,
    registry: &Registry,
    cfg: &RetrievalConfig,
    band_names: &[String],
    d: DistanceFn<'_>,
) -> Result<RetrievalPlan> {
    cfg.validate()?;
    RetrievalPlan::from_ranking(&target.id, &rank(target, registry, d), cfg, band_names)
}

/// Haversine rankings against a fixed registry, computed once per target.
#[derive(Debug)]
pub struct RankingCache {
    registry: Registry,
    cache: Mutex<BTreeMap<String, std::sync::Arc<Vec<Neighbor>>>>,
}

impl RankingCache {
    pub fn new(registry: Registry) -> Self {
        Self {
            registry,
            cache: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn ranking(&self, target: &Station) -> std::sync::Arc<Vec<Neighbor>> {
        let mut cache = self.cache.lock().expect("ranking cache poisoned");
        cache
            .entry(target.id.clone())
            .or_insert_with(|| std::sync::Arc::new(rank(target, &self.registry, DistanceFn::Haversine)))
            .clone()
    }
}
