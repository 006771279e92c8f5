//! Losses and the two-phase training procedure.
//!
//! Phase 1 trains every parameter with each train station acting in turn
//! as a pseudo-target that retrieves from the other train stations.
//! Phase 2 starts from the phase-1 model and updates only the transfer
//! components for one station.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use nalgebra::{DMatrix, DVector};

use crate::data::{window_origins, Dataset, Periods, SplitSpec, WindowShape};
use crate::diff::{Adam, AdamConfig, Graph, Var};
use crate::error::{Error, Result};
use crate::model::{Assembler, Batch, GaussianForecast, Model, TRANSFER_TAG};
use crate::rng::rng_for;

/// Mean squared error.
pub fn loss_mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_len(pred.len(), truth.len())?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// `½ Σ_t (log σ²_t + (y_t − μ_t)² / σ²_t)`.
pub fn loss_nll(f: &GaussianForecast, truth: &[f64]) -> Result<f64> {
    check_len(f.mu.len(), truth.len())?;
    check_len(f.sigma2.len(), truth.len())?;
    if let Some(v) = f.sigma2.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Metric(format!("variance must be positive, got {v}")));
    }
    Ok(0.5
        * f.mu
            .iter()
            .zip(&f.sigma2)
            .zip(truth)
            .map(|((m, v), y)| v.ln() + (y - m).powi(2) / v)
            .sum::<f64>())
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::Metric(format!(
            "prediction length {a} does not match truth length {b}"
        )));
    }
    Ok(())
}

/// Graph MSE over all entries.
pub fn mse_graph(g: &mut Graph, pred: Var, truth: Var) -> Result<Var> {
    let e = g.sub(pred, truth)?;
    let e2 = g.square(e);
    Ok(g.mean(e2))
}

/// Graph NLL for `[B, L]` inputs: summed over time, averaged over the batch.
pub fn nll_graph(g: &mut Graph, mu: Var, var: Var, truth: Var) -> Result<Var> {
    let b = g.shape(mu)[0].max(1);
    let e = g.sub(mu, truth)?;
    let e2 = g.square(e);
    let q = g.div(e2, var)?;
    let lv = g.log(var);
    let s = g.add(lv, q)?;
    let s = g.sum(s);
    Ok(g.scale(s, 0.5 / b as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Mse,
    Nll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Caps the optimizer steps of one epoch.
    #[serde(default)]
    pub max_steps_per_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase1: PhaseConfig,
    pub phase2: PhaseConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Hours between training forecast origins.
    pub stride: usize,
    /// Hours between validation forecast origins.
    pub val_stride: usize,
    /// Target context lengths sampled per batch; empty means always `L_x`.
    #[serde(default)]
    pub context_lengths: Vec<usize>,
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    /// Ridge penalty of the closed-form highway fit that starts phase 1;
    /// `None` leaves the highway at its initial values.
    #[serde(default = "default_highway_ridge")]
    pub highway_ridge: Option<f64>,
}

fn default_highway_ridge() -> Option<f64> {
    Some(1.0)
}

fn default_clip() -> Option<f64> {
    Some(5.0)
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase1: PhaseConfig {
                epochs: 20,
                lr: 1e-3,
                max_steps_per_epoch: None,
            },
            phase2: PhaseConfig {
                epochs: 5,
                lr: 5e-4,
                max_steps_per_epoch: None,
            },
            batch_size: 16,
            seed: 0,
            loss: LossKind::Mse,
            patience: 5,
            stride: 24,
            val_stride: 24,
            context_lengths: Vec::new(),
            clip_norm: default_clip(),
            highway_ridge: default_highway_ridge(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("phase1", &self.phase1), ("phase2", &self.phase2)] {
            if p.epochs == 0 || !(p.lr > 0.0) {
                return Err(Error::Config(format!(
                    "{name} needs positive epochs and learning rate"
                )));
            }
        }
        if matches!(self.highway_ridge, Some(r) if !(r >= 0.0)) {
            return Err(Error::Config("highway_ridge must be non-negative".into()));
        }
        if self.batch_size == 0 || self.stride == 0 || self.val_stride == 0 {
            return Err(Error::Config(
                "batch_size, stride and val_stride must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: Option<f64>,
    /// Validation value of the training loss; drives early stopping.
    pub val_loss: Option<f64>,
}

/// Per-epoch metrics of one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub phase: u8,
    pub station: Option<String>,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept; 0 is the starting point.
    pub best_epoch: usize,
    pub best_val_mse: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub steps: usize,
}

pub(crate) fn indices(ds: &Dataset, ids: &[String]) -> Result<Vec<usize>> {
    ids.iter()
        .map(|id| {
            ds.registry
                .position(id)
                .ok_or_else(|| Error::Data(format!("unknown station {id}")))
        })
        .collect()
}

/// `(origin, station)` pairs that may share a batch.
pub(crate) type Group = Vec<(i64, usize)>;

/// Windows whose horizon lies in `range`, one group per origin.
pub(crate) fn groups_by_origin(ds: &Dataset, stations: &[usize], shape: WindowShape, range: (i64, i64)) -> Vec<Group> {
    let mut out: BTreeMap<i64, Group> = BTreeMap::new();
    for &i in stations {
        for t0 in window_origins(&ds.tables[i], shape, Some(range)) {
            out.entry(t0).or_default().push((t0, i));
        }
    }
    out.into_values().collect()
}

/// Loss of one batch against normalized targets.
fn batch_loss(
    model: &Model,
    asm: &Assembler<'_>,
    g: &mut Graph,
    batch: &Batch,
    items: &[(i64, usize)],
    loss: LossKind,
) -> Result<Var> {
    let ly = model.cfg.ly;
    let mut truth = Vec::with_capacity(items.len() * ly);
    for &(t0, i) in items {
        let h = asm.horizon_at(i, t0).ok_or_else(|| {
            Error::Data(format!("no horizon at hour {t0} for station index {i}"))
        })?;
        truth.extend(h.into_iter().map(|y| model.norm.normalize_target(y)));
    }
    let out = model.forward(g, batch)?;
    let y = g.input(&[items.len(), ly], truth)?;
    match (loss, out.var) {
        (LossKind::Nll, Some(v)) => nll_graph(g, out.mean, v, y),
        (LossKind::Nll, None) => Err(Error::Config(
            "nll loss needs the gaussian head".into(),
        )),
        (LossKind::Mse, _) => mse_graph(g, out.mean, y),
    }
}

/// Mean normalized MSE of the forecast mean over every window of `groups`.
#[cfg(test)]
fn evaluate_mse(model: &Model, asm: &Assembler<'_>, groups: &[Group]) -> Result<Option<f64>> {
    Ok(evaluate(model, asm, groups, LossKind::Mse)?.map(|v| v.0))
}

/// Normalized MSE and mean per-window `loss` over every window of `groups`.
fn evaluate(model: &Model, asm: &Assembler<'_>, groups: &[Group], loss: LossKind) -> Result<Option<(f64, f64)>> {
    let ly = model.cfg.ly;
    let (mut se, mut nll, mut n) = (0.0, 0.0, 0usize);
    for items in groups {
        let batch = asm.batch(items, model.cfg.lx)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch)?;
        let pred = g.data(out.mean);
        let var = out.var.map(|v| g.data(v));
        if loss == LossKind::Nll && var.is_none() {
            return Err(Error::Config("nll loss needs the gaussian head".into()));
        }
        for (k, &(t0, i)) in items.iter().enumerate() {
            let h = asm.horizon_at(i, t0).expect("origin has a horizon");
            for (t, y) in h.iter().enumerate() {
                let e = pred[k * ly + t] - model.norm.normalize_target(*y);
                se += e * e;
                if let (LossKind::Nll, Some(v)) = (loss, var) {
                    let v = v[k * ly + t];
                    nll += 0.5 * (v.ln() + e * e / v);
                }
            }
            n += 1;
        }
    }
    if n == 0 {
        return Ok(None);
    }
    let mse = se / (n * ly) as f64;
    Ok(Some(match loss {
        LossKind::Mse => (mse, mse),
        LossKind::Nll => (mse, nll / n as f64),
    }))
}

/// Shuffled `(context length, items)` batches, each drawn from one group
/// so that windows sharing an origin share their retrieved encodings.
fn schedule<R: Rng>(
    groups: &[Group],
    cfg: &TrainConfig,
    lx: usize,
    rng: &mut R,
    max_steps: Option<usize>,
) -> Vec<(usize, Group)> {
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for gi in order {
        let mut items = groups[gi].clone();
        items.shuffle(rng);
        for chunk in items.chunks(cfg.batch_size) {
            let c = if cfg.context_lengths.is_empty() {
                lx
            } else {
                cfg.context_lengths[rng.random_range(0..cfg.context_lengths.len())]
            };
            batches.push((c, chunk.to_vec()));
        }
    }
    if let Some(m) = max_steps {
        batches.truncate(m);
    }
    batches
}

struct Loop<'a> {
    train: Vec<Group>,
    val: Vec<Group>,
    asm: Assembler<'a>,
    phase: u8,
}

fn run_loop(model: &mut Model, l: &Loop<'_>, cfg: &TrainConfig, pc: &PhaseConfig, station: Option<String>) -> Result<TrainLog> {
    let mut adam = Adam::new(AdamConfig {
        lr: pc.lr,
        clip_norm: cfg.clip_norm,
        ..AdamConfig::default()
    });
    let label = format!("train/phase{}/{}", l.phase, station.as_deref().unwrap_or("all"));
    let start = evaluate(model, &l.asm, &l.val, cfg.loss)?;
    let mut best = start.map(|v| v.1);
    let mut best_params = model.params.clone();
    let mut log = TrainLog {
        phase: l.phase,
        station,
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_mse: start.map(|v| v.0),
        best_val_loss: best,
        steps: 0,
    };
    let mut stale = 0;
    for epoch in 1..=pc.epochs {
        let mut rng = rng_for(cfg.seed, &format!("{label}/epoch{epoch}"));
        let batches = schedule(&l.train, cfg, model.cfg.lx, &mut rng, pc.max_steps_per_epoch);
        let (mut total, mut count) = (0.0, 0usize);
        for (c, items) in &batches {
            let batch = l.asm.batch(items, *c)?;
            let mut g = Graph::new();
            let loss = batch_loss(model, &l.asm, &mut g, &batch, items, cfg.loss)?;
            let v = g.scalar_value(loss);
            if !v.is_finite() {
                return Err(Error::Diverged {
                    step: log.steps,
                    loss: v,
                });
            }
            g.backward(loss)?;
            let grads = g.param_grads();
            adam.step(&mut model.params, &grads);
            log.steps += 1;
            total += v * items.len() as f64;
            count += items.len();
        }
        let v = evaluate(model, &l.asm, &l.val, cfg.loss)?;
        let val = v.map(|v| v.1);
        log.epochs.push(EpochLog {
            epoch,
            train_loss: if count > 0 { total / count as f64 } else { f64::NAN },
            val_mse: v.map(|v| v.0),
            val_loss: val,
        });
        match (val, best) {
            (Some(v), Some(b)) if v >= b => {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
            (Some(v), _) => {
                best = Some(v);
                best_params = model.params.clone();
                log.best_epoch = epoch;
                log.best_val_mse = log.epochs.last().and_then(|e| e.val_mse);
                stale = 0;
            }
            (None, _) => {
                best_params = model.params.clone();
                log.best_epoch = epoch;
            }
        }
    }
    model.params = best_params;
    log.best_val_loss = best;
    Ok(log)
}

fn span_periods(ds: &Dataset, split: &SplitSpec) -> Result<Periods> {
    let span = ds
        .hour_span()
        .ok_or_else(|| Error::Data("dataset is empty".into()))?;
    Ok(split.periods(span))
}

/// Phase 1: all parameters trainable; pseudo-targets are the train stations,
/// each retrieving from the others; the best validation epoch is kept.
pub fn train_phase1(ds: &Dataset, split: &SplitSpec, model: &mut Model, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    split.validate()?;
    if split.train_station_ids.is_empty() {
        return Err(Error::Config("phase 1 needs at least one train station".into()));
    }
    model.params.set_trainable(|_| true);
    let periods = span_periods(ds, split)?;
    let mcfg = model.cfg.clone();
    let train_idx = indices(ds, &split.train_station_ids)?;
    let val_idx = indices(ds, &split.val_station_ids)?;
    let shape = WindowShape::new(mcfg.lx, mcfg.ly, cfg.stride)?;
    let vshape = WindowShape::new(mcfg.lx, mcfg.ly, cfg.val_stride)?;
    let l = Loop {
        train: groups_by_origin(ds, &train_idx, shape, periods.train),
        val: groups_by_origin(ds, &val_idx, vshape, periods.val),
        asm: Assembler::new(ds, &mcfg, &split.train_station_ids, model.norm, model.coords)?,
        phase: 1,
    };
    if l.train.is_empty() {
        return Err(Error::Data("no training windows in the train period".into()));
    }
    if let (true, Some(ridge)) = (mcfg.has_highway(), cfg.highway_ridge) {
        fit_highway(model, &l.asm, &l.train, ridge, cfg.batch_size)?;
        // The fitted highway is already least-squares optimal; gradient
        // steps go to the network only.
        model.params.set_trainable(|n| !is_highway(n));
    }
    let log = run_loop(model, &l, cfg, &cfg.phase1, None);
    model.params.set_trainable(|_| true);
    log
}

fn is_highway(name: &str) -> bool {
    name.starts_with("highway.") || name.contains(&format!("{TRANSFER_TAG}hw."))
}

/// Ridge regression of the normalized horizon on the highway features,
/// one fit per highway context, written into the highway parameters. The
/// bias is not penalized.
fn fit_highway(model: &mut Model, asm: &Assembler<'_>, groups: &[Group], ridge: f64, batch_size: usize) -> Result<()> {
    let (lx, ly) = (model.cfg.lx, model.cfg.ly);
    let n_ret = if model.cfg.use_retrieval { model.layouts().len() } else { 0 };
    for c in model.cfg.highway_contexts.clone() {
        let n = c + n_ret * lx + 1;
        let mut xtx = DMatrix::<f64>::zeros(n, n);
        let mut xty = DMatrix::<f64>::zeros(n, ly);
        let mut x = DVector::<f64>::zeros(n);
        for items in groups.iter().flat_map(|g| g.chunks(batch_size)) {
            let batch = asm.batch(items, c)?;
            let feats = model.highway_features(&batch)?;
            for (k, &(t0, i)) in items.iter().enumerate() {
                let h = asm.horizon_at(i, t0).ok_or_else(|| {
                    Error::Data(format!("no horizon at hour {t0} for station index {i}"))
                })?;
                x.rows_mut(0, c).copy_from_slice(&feats.own[k * c..(k + 1) * c]);
                for (b, r) in feats.retrieved.iter().enumerate() {
                    x.rows_mut(c + b * lx, lx).copy_from_slice(&r[k * lx..(k + 1) * lx]);
                }
                x[n - 1] = 1.0;
                xtx.ger(1.0, &x, &x, 1.0);
                for (j, y) in h.iter().enumerate() {
                    xty.column_mut(j).axpy(model.norm.normalize_target(*y), &x, 1.0);
                }
            }
        }
        for k in 0..n - 1 {
            xtx[(k, k)] += ridge;
        }
        // Keeps the bias row solvable when no window was seen.
        xtx[(n - 1, n - 1)] += 1e-9;
        let sol = xtx
            .cholesky()
            .ok_or_else(|| Error::Metric("highway fit is singular".into()))?
            .solve(&xty);
        let block = |off: usize, width: usize| -> Vec<f64> {
            (0..ly)
                .flat_map(|j| (0..width).map(move |k| (j, k)))
                .map(|(j, k)| sol[(off + k, j)])
                .collect()
        };
        if c > 0 {
            model.params.set_data(&format!("highway.c{c}.w"), block(0, c))?;
        }
        for b in 0..n_ret {
            model
                .params
                .set_data(&format!("b{b}{TRANSFER_TAG}hw.c{c}"), block(c + b * lx, lx))?;
        }
        model
            .params
            .set_data(&format!("highway.c{c}.b"), (0..ly).map(|j| sol[(n - 1, j)]).collect())?;
    }
    Ok(())
}

/// Phase 2: from a phase-1 model, only transfer parameters are updated,
/// on `station`'s own train-period windows. The returned model keeps the
/// better of its starting point and each epoch on that station's
/// validation-period windows.
pub fn train_phase2(
    ds: &Dataset,
    split: &SplitSpec,
    model: &Model,
    station: &str,
    cfg: &TrainConfig,
) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    if model.transfer_param_names().is_empty() {
        return Err(Error::Checkpoint("model has no transfer parameters to adapt".into()));
    }
    if !split.train_station_ids.iter().any(|s| s == station) {
        return Err(Error::Config(format!("{station} is not a train station")));
    }
    let mut adapted = model.clone();
    adapted.params.set_trainable(|n| n.contains(TRANSFER_TAG));
    let periods = span_periods(ds, split)?;
    let mcfg = model.cfg.clone();
    let idx = indices(ds, &[station.to_string()])?;
    let shape = WindowShape::new(mcfg.lx, mcfg.ly, cfg.stride)?;
    let vshape = WindowShape::new(mcfg.lx, mcfg.ly, cfg.val_stride)?;
    // A single station: its windows form one group, so batches mix origins.
    let flat = |groups: Vec<Group>| -> Vec<Group> {
        let all: Group = groups.into_iter().flatten().collect();
        if all.is_empty() {
            Vec::new()
        } else {
            vec![all]
        }
    };
    let l = Loop {
        train: flat(groups_by_origin(ds, &idx, shape, periods.train)),
        val: flat(groups_by_origin(ds, &idx, vshape, periods.val)),
        asm: Assembler::new(ds, &mcfg, &split.train_station_ids, model.norm, model.coords)?,
        phase: 2,
    };
    if l.train.is_empty() {
        return Err(Error::Data(format!("{station}: no training windows")));
    }
    let log = run_loop(&mut adapted, &l, cfg, &cfg.phase2, Some(station.to_string()))?;
    adapted.params.set_trainable(|_| true);
    Ok((adapted, log))
}
