//! Batches of forecasting queries and their assembly from a dataset.

use std::collections::BTreeMap;

use super::config::ModelConfig;
use crate::data::{CoordStats, Dataset, NormStats, Registry, Station, N_VARS, TARGET};
use crate::error::{Error, Result};
use crate::retrieval::{haversine_deg, RankingCache};

/// A station whose full `L_x` context is encoded once and shared.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolStation {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    pub std_coords: [f64; 3],
    /// Row-major `[L_x × N_VARS]`, z-scored.
    pub context: Vec<f64>,
}

/// One station to forecast.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetQuery {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    pub std_coords: [f64; 3],
    /// Row-major `[c × N_VARS]`, z-scored; `c` may be zero.
    pub context: Vec<f64>,
    /// Set when the target's own full context is already in the pool.
    pub pool_index: Option<usize>,
    /// Per band, `(pool index, distance km)` nearest first.
    pub retrieved: Vec<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Context hours shared by every target.
    pub context_len: usize,
    pub pool: Vec<PoolStation>,
    pub targets: Vec<TargetQuery>,
}

impl Batch {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.check_context_len(self.context_len)?;
        if self.targets.is_empty() {
            return Err(Error::Data("batch has no targets".into()));
        }
        for p in &self.pool {
            if p.context.len() != cfg.lx * N_VARS {
                return Err(Error::Data(format!(
                    "pool station {} has {} context values, expected {}",
                    p.id,
                    p.context.len(),
                    cfg.lx * N_VARS
                )));
            }
        }
        let bands = cfg.bands();
        for t in &self.targets {
            if t.context.len() != self.context_len * N_VARS {
                return Err(Error::Data(format!(
                    "target {} has {} context values, expected {}",
                    t.id,
                    t.context.len(),
                    self.context_len * N_VARS
                )));
            }
            if let Some(i) = t.pool_index {
                if i >= self.pool.len() || self.context_len != cfg.lx {
                    return Err(Error::Data(format!(
                        "target {} reuses pool entry {i} without a full context",
                        t.id
                    )));
                }
            }
            if !cfg.use_retrieval {
                continue;
            }
            if t.retrieved.len() != bands.len() {
                return Err(Error::Retrieval(format!(
                    "target {}: {} retrieved sets for {} bands",
                    t.id,
                    t.retrieved.len(),
                    bands.len()
                )));
            }
            for (set, band) in t.retrieved.iter().zip(&bands) {
                if set.len() != band.k {
                    return Err(Error::Retrieval(format!(
                        "target {}: band {} expects {} stations, got {}",
                        t.id,
                        band.name,
                        band.k,
                        set.len()
                    )));
                }
                if set.iter().any(|(i, _)| *i >= self.pool.len()) {
                    return Err(Error::Retrieval(format!(
                        "target {}: retrieved index out of range",
                        t.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Builds batches at a forecast origin from a fixed candidate set of
/// retrievable stations.
pub struct Assembler<'a> {
    ds: &'a Dataset,
    cfg: &'a ModelConfig,
    norm: NormStats,
    coords: CoordStats,
    /// Dataset indices of the retrievable stations.
    candidates: Vec<usize>,
    cache: RankingCache,
}

impl<'a> Assembler<'a> {
    pub fn new<S: AsRef<str>>(
        ds: &'a Dataset,
        cfg: &'a ModelConfig,
        candidate_ids: &[S],
        norm: NormStats,
        coords: CoordStats,
    ) -> Result<Self> {
        let candidates = candidate_ids
            .iter()
            .map(|id| {
                ds.registry.position(id.as_ref()).ok_or_else(|| {
                    Error::Data(format!("unknown station {}", id.as_ref()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let registry = ds.registry.subset(candidate_ids)?;
        Ok(Self {
            ds,
            cfg,
            norm,
            coords,
            candidates,
            cache: RankingCache::new(registry),
        })
    }

    pub fn dataset(&self) -> &Dataset {
        self.ds
    }

    pub fn candidates(&self) -> &Registry {
        self.cache.registry()
    }

    /// z-scored context `[t0 - c, t0)` of dataset station `idx`.
    pub fn context_at(&self, idx: usize, c: usize, t0: i64) -> Option<Vec<f64>> {
        let table = &self.ds.tables[idx];
        let rows = table.contiguous(t0 - c as i64, c)?;
        let mut out = Vec::with_capacity(c * N_VARS);
        for r in &table.values[rows] {
            out.extend_from_slice(&self.norm.normalize(r));
        }
        Some(out)
    }

    /// Target variable over `[t0, t0 + L_y)` in °F.
    pub fn horizon_at(&self, idx: usize, t0: i64) -> Option<Vec<f64>> {
        let table = &self.ds.tables[idx];
        let rows = table.contiguous(t0, self.cfg.ly)?;
        Some(table.values[rows].iter().map(|r| r[TARGET]).collect())
    }

    /// Batch of `(t0, dataset station index)` queries, each forecast from
    /// its own origin with `c` context hours. Retrieved stations lacking a
    /// full context at that origin are skipped in favor of the next nearest.
    pub fn batch(&self, items: &[(i64, usize)], c: usize) -> Result<Batch> {
        self.cfg.check_context_len(c)?;
        let lx = self.cfg.lx;
        let kmax = self.cfg.retrieval.largest();
        let mut available: BTreeMap<(i64, usize), Option<usize>> = BTreeMap::new();
        let mut pool: Vec<PoolStation> = Vec::new();
        let mut slot = |idx: usize, t0: i64, pool: &mut Vec<PoolStation>| -> Option<usize> {
            *available.entry((t0, idx)).or_insert_with(|| {
                let st = &self.ds.stations()[idx];
                let context = self.context_at(idx, lx, t0)?;
                pool.push(PoolStation {
                    id: st.id.clone(),
                    lat: st.lat,
                    lon: st.lon,
                    std_coords: self.coords.standardize(st),
                    context,
                });
                Some(pool.len() - 1)
            })
        };
        let mut queries = Vec::with_capacity(items.len());
        for &(t0, idx) in items {
            let st: &Station = &self.ds.stations()[idx];
            let context = self.context_at(idx, c, t0).ok_or_else(|| {
                Error::Data(format!("{}: no gap-free context before hour {t0}", st.id))
            })?;
            let mut retrieved = Vec::new();
            let mut pool_index = None;
            if self.cfg.use_retrieval {
                let ranking = self.cache.ranking(st);
                let mut chosen = Vec::with_capacity(kmax);
                for n in ranking.iter() {
                    if chosen.len() == kmax {
                        break;
                    }
                    let cand = self.candidates[self.cache.registry().position(&n.id).expect("ranked")];
                    if let Some(i) = slot(cand, t0, &mut pool) {
                        chosen.push((i, n.distance_km));
                    }
                }
                if chosen.len() < kmax {
                    return Err(Error::Retrieval(format!(
                        "{}: only {} stations with context at hour {t0}, need {kmax}",
                        st.id,
                        chosen.len()
                    )));
                }
                retrieved = self
                    .cfg
                    .retrieval
                    .ks
                    .iter()
                    .map(|&k| chosen[..k].to_vec())
                    .collect();
                if c == lx {
                    pool_index = slot(idx, t0, &mut pool);
                }
            }
            queries.push(TargetQuery {
                id: st.id.clone(),
                lat: st.lat,
                lon: st.lon,
                std_coords: self.coords.standardize(st),
                context,
                pool_index,
                retrieved,
            });
        }
        Ok(Batch {
            context_len: c,
            pool,
            targets: queries,
        })
    }
}

/// Haversine distances among `ids` (pool indices) plus the target, with the
/// target last; row-major `(k+1)²`.
pub(crate) fn pairwise_with_target(pool: &[PoolStation], ids: &[usize], t: &TargetQuery) -> Vec<f64> {
    let pts: Vec<(f64, f64)> = ids
        .iter()
        .map(|&i| (pool[i].lat, pool[i].lon))
        .chain(std::iter::once((t.lat, t.lon)))
        .collect();
    let n = pts.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = haversine_deg(pts[i].0, pts[i].1, pts[j].0, pts[j].1);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}
