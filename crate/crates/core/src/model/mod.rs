//! Resolution-aware retrieval-augmented forecaster.
//!
//! Per frequency band: decompose every context, encode it, estimate the
//! target's state from its retrieved stations with a transfer component,
//! gate in the target's own state, decode the band's horizon coefficients.
//! The coefficient horizons are mapped back to hours by the inverse
//! transform, which is linear and applied as a fixed matrix.

pub mod batch;
pub mod blocks;
pub mod config;
pub mod network;
pub mod transfer;

pub use batch::{Assembler, Batch, PoolStation, TargetQuery};
pub use config::{BandLayout, HeadKind, ModelConfig, TransferConfig, TransferKind};

use serde::{Deserialize, Serialize};

use crate::data::{CoordStats, Dataset, NormStats, Station, N_VARS, TARGET};
use crate::diff::{Checkpoint, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::multires::{band_component, decompose, reconstruction_matrix};
use crate::retrieval::{LocationEmbedder, RetrievalPlan};
use crate::rng::rng_for;

/// Substring marking parameters of the transfer components.
pub const TRANSFER_TAG: &str = ".transfer.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianForecast {
    /// °F.
    pub mu: Vec<f64>,
    /// °F², strictly positive.
    pub sigma2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Forecast {
    Point(Vec<f64>),
    Gaussian(GaussianForecast),
}

impl Forecast {
    pub fn mean(&self) -> &[f64] {
        match self {
            Forecast::Point(v) => v,
            Forecast::Gaussian(g) => &g.mu,
        }
    }

    pub fn variance(&self) -> Option<&[f64]> {
        match self {
            Forecast::Point(_) => None,
            Forecast::Gaussian(g) => Some(&g.sigma2),
        }
    }
}

/// Graph outputs in normalized units, `[B, L_y]` each.
#[derive(Debug, Clone, Copy)]
pub struct BatchOutput {
    pub mean: Var,
    pub var: Option<Var>,
}

/// See [`Model::highway_features`].
#[derive(Debug, Clone, PartialEq)]
pub struct HighwayFeatures {
    pub own: Vec<f64>,
    pub retrieved: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub norm: NormStats,
    pub coords: CoordStats,
    layouts: Vec<BandLayout>,
    /// `R^T` and `(R ∘ R)^T` of the inverse transform, `[L_y × L_y]`.
    recon_t: Option<(Tensor, Tensor)>,
}

fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let mut rng = rng_for(seed, "model/init");
    let mut p = ParamStore::new();
    if cfg.use_retrieval {
        network::init_location(&mut p, cfg.d_loc, &mut rng)?;
    }
    for (b, band) in cfg.bands().iter().enumerate() {
        network::init_encoder(&mut p, &format!("b{b}.enc"), cfg, band, &mut rng)?;
        if cfg.use_retrieval {
            transfer::init_transfer(&mut p, &format!("b{b}.transfer"), cfg, band.ctx_len, &mut rng)?;
            transfer::init_gate(&mut p, &format!("b{b}.gate"), cfg.d_model, &mut rng)?;
        }
        network::init_decoder(&mut p, &format!("b{b}.dec"), cfg, band, &mut rng)?;
        network::init_head(&mut p, &format!("b{b}.head"), cfg, band, &mut rng)?;
    }
    for &c in &cfg.highway_contexts {
        if c > 0 {
            p.insert_const(format!("highway.c{c}.w"), &[cfg.ly, c], 0.0)?;
        }
        p.insert_const(format!("highway.c{c}.b"), &[cfg.ly], 0.0)?;
        if cfg.use_retrieval {
            for b in 0..cfg.n_bands() {
                p.insert_const(format!("b{b}{TRANSFER_TAG}hw.c{c}"), &[cfg.ly, cfg.lx], 0.0)?;
            }
        }
    }
    Ok(p)
}

impl Model {
    pub fn new(cfg: ModelConfig, norm: NormStats, coords: CoordStats, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg, seed)?;
        Self::assemble(cfg, params, norm, coords)
    }

    fn assemble(cfg: ModelConfig, params: ParamStore, norm: NormStats, coords: CoordStats) -> Result<Self> {
        let recon_t = match cfg.band_spec() {
            None => None,
            Some(spec) => {
                let n = cfg.ly;
                let r = reconstruction_matrix(n, &spec)?;
                let mut rt = vec![0.0; n * n];
                let mut r2t = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        rt[j * n + i] = r[i * n + j];
                        r2t[j * n + i] = r[i * n + j] * r[i * n + j];
                    }
                }
                Some((Tensor::new(vec![n, n], rt)?, Tensor::new(vec![n, n], r2t)?))
            }
        };
        Ok(Self {
            layouts: cfg.bands(),
            cfg,
            params,
            norm,
            coords,
            recon_t,
        })
    }

    pub fn layouts(&self) -> &[BandLayout] {
        &self.layouts
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_digest: self.cfg.digest(),
            params: self.params.clone(),
            norm_stats: self.norm,
            coord_stats: self.coords,
        }
    }

    /// Rebuilds a model, checking the configuration digest and that the
    /// parameter set matches the configuration exactly.
    pub fn from_checkpoint(cfg: ModelConfig, ckpt: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        ckpt.verify_digest(&cfg.digest())?;
        let expected = init_params(&cfg, 0)?;
        for (name, p) in expected.iter() {
            let got = ckpt
                .params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if got.tensor.shape != p.tensor.shape {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    got.tensor.shape, p.tensor.shape
                )));
            }
        }
        if ckpt.params.len() != expected.len() {
            return Err(Error::Checkpoint("unexpected extra parameters".into()));
        }
        Self::assemble(cfg, ckpt.params, ckpt.norm_stats, ckpt.coord_stats)
    }

    pub fn transfer_param_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| n.contains(TRANSFER_TAG))
            .cloned()
            .collect()
    }

    /// Location embedding `ℓ(st)`.
    pub fn embed_location(&self, st: &Station) -> Result<Vec<f64>> {
        if !self.cfg.use_retrieval {
            return Err(Error::Config("model has no location embedding".into()));
        }
        let mut g = Graph::new();
        let x = g.input(&[1, 3], self.coords.standardize(st).to_vec())?;
        let e = network::embed_location(&mut g, &self.params, x)?;
        Ok(g.data(e).to_vec())
    }

    /// Per-band encoder inputs for a row-major `[c × N_VARS]` context:
    /// `[c_b × in_channels]` with channel `s · N_VARS + v` holding
    /// sequence `s` of the band for variable `v`.
    pub fn band_inputs(&self, context: &[f64], c: usize) -> Result<Vec<Vec<f64>>> {
        if context.len() != c * N_VARS {
            return Err(Error::Shape {
                op: "band_inputs",
                left: vec![context.len()],
                right: vec![c, N_VARS],
            });
        }
        let Some(spec) = self.cfg.band_spec() else {
            return Ok(vec![context.to_vec()]);
        };
        if c == 0 {
            return Ok(vec![Vec::new(); spec.n_bands()]);
        }
        let sets = (0..N_VARS)
            .map(|v| {
                let col: Vec<f64> = (0..c).map(|t| context[t * N_VARS + v]).collect();
                decompose(&col, &spec)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((0..spec.n_bands())
            .map(|b| {
                let seqs = spec.band_sequences(b);
                let len = sets[0].sequence(seqs[0]).len();
                let ch = seqs.len() * N_VARS;
                let mut out = vec![0.0; len * ch];
                for (si, &s) in seqs.iter().enumerate() {
                    for (v, set) in sets.iter().enumerate() {
                        for (t, val) in set.sequence(s).iter().enumerate() {
                            out[t * ch + si * N_VARS + v] = *val;
                        }
                    }
                }
                out
            })
            .collect())
    }

    fn stack_inputs(&self, ctxs: &[&[f64]], c: usize) -> Result<Vec<Tensor>> {
        let n = ctxs.len();
        let mut per_band: Vec<Vec<f64>> = vec![Vec::new(); self.layouts.len()];
        for ctx in ctxs {
            for (b, x) in self.band_inputs(ctx, c)?.into_iter().enumerate() {
                per_band[b].extend(x);
            }
        }
        per_band
            .into_iter()
            .zip(&self.layouts)
            .map(|(data, band)| {
                let t = if self.cfg.band_spec().is_some() {
                    c >> (band.seqs[0] + 1)
                } else {
                    c
                };
                Tensor::new(vec![n, t, band.in_channels], data)
            })
            .collect()
    }

    /// Builds the forward graph for a batch.
    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> Result<BatchOutput> {
        self.forward_with(g, &self.params, batch)
    }

    /// [`Model::forward`] with an explicit parameter store of the same layout.
    pub fn forward_with(&self, g: &mut Graph, p: &ParamStore, batch: &Batch) -> Result<BatchOutput> {
        let cfg = &self.cfg;
        batch.validate(cfg)?;
        let c = batch.context_len;
        let targets = &batch.targets;
        let nt = targets.len();
        let d = cfg.d_model;

        let retrieval = cfg.use_retrieval && !batch.pool.is_empty();
        if cfg.use_retrieval && batch.pool.is_empty() {
            return Err(Error::Retrieval("retrieval model given an empty pool".into()));
        }
        let (pool_in, loc_pool, loc_tar) = if retrieval {
            let ctxs: Vec<&[f64]> = batch.pool.iter().map(|s| s.context.as_slice()).collect();
            let pool_in = self.stack_inputs(&ctxs, cfg.lx)?;
            let pc: Vec<f64> = batch.pool.iter().flat_map(|s| s.std_coords).collect();
            let pc = g.input(&[batch.pool.len(), 3], pc)?;
            let tc: Vec<f64> = targets.iter().flat_map(|t| t.std_coords).collect();
            let tc = g.input(&[nt, 3], tc)?;
            let lp = network::embed_location(g, p, pc)?;
            let lt = network::embed_location(g, p, tc)?;
            (pool_in, Some(lp), Some(lt))
        } else {
            (Vec::new(), None, None)
        };

        let fresh: Vec<usize> = (0..nt).filter(|&i| targets[i].pool_index.is_none()).collect();
        let fresh_in = if fresh.is_empty() {
            Vec::new()
        } else {
            let ctxs: Vec<&[f64]> = fresh.iter().map(|&i| targets[i].context.as_slice()).collect();
            self.stack_inputs(&ctxs, c)?
        };
        let mut fresh_pos = vec![usize::MAX; nt];
        for (j, &i) in fresh.iter().enumerate() {
            fresh_pos[i] = j;
        }

        let mut coef_mu = Vec::new();
        let mut coef_var = Vec::new();
        for (b, band) in self.layouts.iter().enumerate() {
            let enc = format!("b{b}.enc");
            let pool_states = if retrieval {
                let x = g.constant(pool_in[b].clone());
                Some(network::encode(g, p, &enc, cfg, x, band.ctx_len)?)
            } else {
                None
            };
            let fresh_states = if fresh.is_empty() {
                None
            } else {
                let x = g.constant(fresh_in[b].clone());
                Some(network::encode(g, p, &enc, cfg, x, band.ctx_len)?)
            };
            let mut memories = Vec::with_capacity(nt);
            for (i, t) in targets.iter().enumerate() {
                let own = match t.pool_index {
                    Some(pi) => g.select(pool_states.expect("pool"), &[pi])?,
                    None => g.select(fresh_states.expect("fresh"), &[fresh_pos[i]])?,
                };
                let own_len = g.shape(own)[1];
                let own = g.reshape(own, &[own_len, d])?;
                let mem = if retrieval {
                    let set = &t.retrieved[b];
                    let idx: Vec<usize> = set.iter().map(|r| r.0).collect();
                    let dist: Vec<f64> = set.iter().map(|r| r.1).collect();
                    let states = g.select(pool_states.expect("pool"), &idx)?;
                    let loc_ret = g.select(loc_pool.expect("pool"), &idx)?;
                    let loc_t = g.select(loc_tar.expect("targets"), &[i])?;
                    let pairwise = (cfg.transfer.kind == TransferKind::Gnn)
                        .then(|| batch::pairwise_with_target(&batch.pool, &idx, t));
                    let input = transfer::TransferInput {
                        states,
                        loc_ret,
                        loc_tar: loc_t,
                        dist_to_target: &dist,
                        pairwise: pairwise.as_deref(),
                    };
                    let z = transfer::apply(g, p, &format!("b{b}.transfer"), cfg, &input)?;
                    let padded = transfer::pad_front(g, own, band.ctx_len)?;
                    transfer::gate(g, p, &format!("b{b}.gate"), z, padded)?
                } else {
                    own
                };
                let t_len = g.shape(mem)[0];
                memories.push(g.reshape(mem, &[1, t_len, d])?);
            }
            let memory = if memories.len() == 1 {
                memories[0]
            } else {
                g.concat(&memories, 0)?
            };
            let h = network::decode(g, p, &format!("b{b}.dec"), cfg, memory)?;
            let (mu, var) = network::head(g, p, &format!("b{b}.head"), cfg, h)?;
            let hl = band.horizon_len;
            for ci in 0..band.out_channels() {
                let m = g.slice(mu, 2, ci, 1)?;
                coef_mu.push(g.reshape(m, &[nt, hl])?);
                if let Some(v) = var {
                    let s = g.slice(v, 2, ci, 1)?;
                    coef_var.push(g.reshape(s, &[nt, hl])?);
                }
            }
        }
        let join = |g: &mut Graph, xs: &[Var]| -> Result<Var> {
            if xs.len() == 1 {
                Ok(xs[0])
            } else {
                g.concat(xs, 1)
            }
        };
        let mut mean = join(g, &coef_mu)?;
        let mut var = if coef_var.is_empty() {
            None
        } else {
            Some(join(g, &coef_var)?)
        };
        if let Some((rt, r2t)) = &self.recon_t {
            let rt = g.constant(rt.clone());
            mean = g.matmul(mean, rt)?;
            if let Some(v) = var {
                let r2t = g.constant(r2t.clone());
                var = Some(g.matmul(v, r2t)?);
            }
        }
        if cfg.has_highway() {
            mean = self.highway(g, p, batch, mean)?;
        }
        Ok(BatchOutput { mean, var })
    }

    /// Inputs of the linear highway: the target variable over each target's
    /// own context (`[nt × c]`), and with retrieval, per band, the
    /// inverse-distance weighted mean of that band's component of the
    /// retrieved stations' target variable (`[nt × L_x]`).
    pub fn highway_features(&self, batch: &Batch) -> Result<HighwayFeatures> {
        let own = batch
            .targets
            .iter()
            .flat_map(|t| t.context.chunks(N_VARS).map(|r| r[TARGET]))
            .collect();
        if !self.cfg.use_retrieval {
            return Ok(HighwayFeatures {
                own,
                retrieved: Vec::new(),
            });
        }
        let lx = self.cfg.lx;
        let n_bands = self.layouts.len();
        let spec = self.cfg.band_spec();
        let mut components: Vec<Option<Vec<Vec<f64>>>> = vec![None; batch.pool.len()];
        let mut retrieved = vec![Vec::with_capacity(batch.targets.len() * lx); n_bands];
        for t in &batch.targets {
            for (b, set) in t.retrieved.iter().enumerate() {
                let dist: Vec<f64> = set.iter().map(|r| r.1).collect();
                let w = transfer::idw_weights(&dist, true);
                let mut acc = vec![0.0; lx];
                for (&(i, _), wi) in set.iter().zip(&w) {
                    if components[i].is_none() {
                        let x: Vec<f64> = batch.pool[i].context.chunks(N_VARS).map(|r| r[TARGET]).collect();
                        components[i] = Some(match &spec {
                            None => vec![x],
                            Some(spec) => (0..n_bands)
                                .map(|band| band_component(&x, spec, band))
                                .collect::<Result<_>>()?,
                        });
                    }
                    let comp = &components[i].as_ref().expect("filled")[b];
                    for (a, v) in acc.iter_mut().zip(comp) {
                        *a += wi * v;
                    }
                }
                retrieved[b].extend(acc);
            }
        }
        Ok(HighwayFeatures { own, retrieved })
    }

    /// Adds the highway `W x + Σ_b R_b r_b + b` of the shortest highway
    /// context covering the batch, the own context aligned so its latest
    /// hour meets the last column of `W`.
    fn highway(&self, g: &mut Graph, p: &ParamStore, batch: &Batch, mean: Var) -> Result<Var> {
        let c = batch.context_len;
        let nt = batch.targets.len();
        let (lx, ly) = (self.cfg.lx, self.cfg.ly);
        let h = self
            .cfg
            .highway_for(c)
            .ok_or_else(|| Error::Config(format!("no highway covers context {c}")))?;
        let feats = self.highway_features(batch)?;
        let bias = g.param(p, &format!("highway.c{h}.b"))?;
        let bias = g.reshape(bias, &[1, ly])?;
        let bias = g.broadcast_to(bias, &[nt, ly])?;
        let mut mean = g.add(mean, bias)?;
        if c > 0 {
            let x = g.input(&[nt, c], feats.own)?;
            let w = g.param(p, &format!("highway.c{h}.w"))?;
            let w = g.slice(w, 1, h - c, c)?;
            let wt = g.transpose_last2(w)?;
            let lin = g.matmul(x, wt)?;
            mean = g.add(mean, lin)?;
        }
        for (b, r) in feats.retrieved.into_iter().enumerate() {
            let x = g.input(&[nt, lx], r)?;
            let w = g.param(p, &format!("b{b}{TRANSFER_TAG}hw.c{h}"))?;
            let wt = g.transpose_last2(w)?;
            let lin = g.matmul(x, wt)?;
            mean = g.add(mean, lin)?;
        }
        Ok(mean)
    }

    /// Forecasts for every target of `batch`, in °F.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<Forecast>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, batch)?;
        let ly = self.cfg.ly;
        let mean = g.data(out.mean);
        let sd = self.norm.std[crate::data::TARGET];
        Ok((0..batch.targets.len())
            .map(|i| {
                let mu: Vec<f64> = mean[i * ly..(i + 1) * ly]
                    .iter()
                    .map(|z| self.norm.denormalize_target(*z))
                    .collect();
                match out.var {
                    None => Forecast::Point(mu),
                    Some(v) => Forecast::Gaussian(GaussianForecast {
                        mu,
                        sigma2: g.data(v)[i * ly..(i + 1) * ly]
                            .iter()
                            .map(|s| s * sd * sd)
                            .collect(),
                    }),
                }
            })
            .collect())
    }
}

impl LocationEmbedder for Model {
    fn embed(&self, st: &Station) -> Vec<f64> {
        self.embed_location(st).unwrap_or_default()
    }
}

/// Zero-shot forecast for `target` from `t0`, given its (possibly empty)
/// z-scored context `[c × N_VARS]` and a retrieval plan whose stations'
/// full contexts are read from `ds`.
pub fn forecast_zero_shot(
    model: &Model,
    ds: &Dataset,
    target: &Station,
    context: &[f64],
    plan: Option<&RetrievalPlan>,
    t0: i64,
) -> Result<Forecast> {
    let cfg = &model.cfg;
    if context.len() % N_VARS != 0 {
        return Err(Error::Shape {
            op: "forecast_zero_shot",
            left: vec![context.len()],
            right: vec![N_VARS],
        });
    }
    let c = context.len() / N_VARS;
    let mut pool: Vec<PoolStation> = Vec::new();
    let mut retrieved = Vec::new();
    if cfg.use_retrieval {
        let plan = plan.ok_or_else(|| Error::Retrieval("retrieval model needs a plan".into()))?;
        if plan.sizes() != cfg.retrieval.ks {
            return Err(Error::Retrieval(format!(
                "plan sizes {:?} do not match model bands {:?}",
                plan.sizes(),
                cfg.retrieval.ks
            )));
        }
        let mut index = std::collections::BTreeMap::new();
        for band in &plan.bands {
            let mut set = Vec::with_capacity(band.stations.len());
            for n in &band.stations {
                let i = match index.get(&n.id) {
                    Some(&i) => i,
                    None => {
                        let st = ds.registry.require(&n.id)?;
                        let table = ds.table(&n.id).expect("registered");
                        let rows = table.contiguous(t0 - cfg.lx as i64, cfg.lx).ok_or_else(|| {
                            Error::Data(format!("{}: no gap-free context before hour {t0}", n.id))
                        })?;
                        let ctx: Vec<f64> = table.values[rows]
                            .iter()
                            .flat_map(|r| model.norm.normalize(r))
                            .collect();
                        pool.push(PoolStation {
                            id: n.id.clone(),
                            lat: st.lat,
                            lon: st.lon,
                            std_coords: model.coords.standardize(st),
                            context: ctx,
                        });
                        index.insert(n.id.clone(), pool.len() - 1);
                        pool.len() - 1
                    }
                };
                set.push((i, n.distance_km));
            }
            retrieved.push(set);
        }
    }
    let batch = Batch {
        context_len: c,
        pool,
        targets: vec![TargetQuery {
            id: target.id.clone(),
            lat: target.lat,
            lon: target.lon,
            std_coords: model.coords.standardize(target),
            context: context.to_vec(),
            pool_index: None,
            retrieved,
        }],
    };
    Ok(model.predict(&batch)?.remove(0))
}
