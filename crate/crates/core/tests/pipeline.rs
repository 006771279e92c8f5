//! End-to-end: synthetic data, phase-1 training, checkpoints, zero-shot
//! forecasts and evaluation.

use rarf::data::{generate_synthetic, window_origins, CoordStats, Dataset, SplitSpec, SynthConfig, WindowShape};
use rarf::diff::checkpoint::Checkpoint;
use rarf::eval::{evaluate_model, EvalOptions};
use rarf::model::{forecast_zero_shot, Assembler, HeadKind, Model, ModelConfig};
use rarf::retrieval::{plan_retrieval, DistanceFn, RetrievalConfig};
use rarf::train::{train_phase1, PhaseConfig, TrainConfig};

fn data(seed: u64) -> (Dataset, SplitSpec) {
    let mut ds = generate_synthetic(&SynthConfig {
        grid: (4, 4),
        hours: 720,
        ..SynthConfig::with_seed(seed)
    })
    .unwrap();
    let split = SplitSpec::random(&ds.registry, 2, 3, [0.7, 0.1, 0.2], seed).unwrap();
    let p = split.periods(ds.hour_span().unwrap());
    ds.norm_stats = Some(ds.compute_norm_stats(&split.train_station_ids, p.train).unwrap());
    (ds, split)
}

fn config(head: HeadKind) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_loc: 4,
        layers: 1,
        d_ff: 16,
        d_k: 4,
        lx: 24,
        ly: 16,
        wavelet_levels: 2,
        retrieval: RetrievalConfig::new(vec![3, 6]).unwrap(),
        head,
        highway_contexts: vec![24, 8, 0],
        ..ModelConfig::default()
    }
}

fn trained(ds: &Dataset, split: &SplitSpec, head: HeadKind, seed: u64) -> Model {
    let coords = CoordStats::from_stations(ds.stations()).unwrap();
    let mut m = Model::new(config(head), ds.norm_stats.unwrap(), coords, seed).unwrap();
    let cfg = TrainConfig {
        phase1: PhaseConfig {
            epochs: 2,
            lr: 3e-3,
            max_steps_per_epoch: Some(8),
        },
        batch_size: 8,
        seed,
        stride: 8,
        context_lengths: vec![24, 8, 0],
        ..TrainConfig::default()
    };
    train_phase1(ds, split, &mut m, &cfg).unwrap();
    m
}

fn opts() -> EvalOptions {
    EvalOptions {
        stride: 8,
        ..EvalOptions::default()
    }
}

#[test]
fn checkpoint_round_trip_reproduces_the_report() {
    let (ds, split) = data(1);
    let m = trained(&ds, &split, HeadKind::Gaussian, 1);
    let bytes = m.to_checkpoint().to_bytes();
    let back = Model::from_checkpoint(m.cfg.clone(), Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    let a = evaluate_model(&m, &ds, &split, &split.test_station_ids, &opts(), "m").unwrap();
    let b = evaluate_model(&back, &ds, &split, &split.test_station_ids, &opts(), "m").unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert!(a.average.coverage.is_some() && a.average.crps.is_some());

    let mut other = m.cfg.clone();
    other.d_ff = 32;
    let e = Model::from_checkpoint(other, Checkpoint::from_bytes(&bytes).unwrap()).unwrap_err();
    assert_eq!(e.category(), "checkpoint");
}

#[test]
fn zero_shot_forecast_matches_the_batched_path() {
    let (ds, split) = data(2);
    let m = trained(&ds, &split, HeadKind::Deterministic, 2);
    let asm = Assembler::new(&ds, &m.cfg, &split.train_station_ids, m.norm, m.coords).unwrap();
    let candidates = ds.registry.subset(&split.train_station_ids).unwrap();
    let test = split.periods(ds.hour_span().unwrap()).test;
    for id in &split.test_station_ids {
        let st = ds.registry.require(id).unwrap().clone();
        let idx = ds.registry.position(id).unwrap();
        let table = ds.table(id).unwrap();
        let shape = WindowShape::new(m.cfg.lx, m.cfg.ly, 8).unwrap();
        let plan = plan_retrieval(&st, &candidates, &m.cfg.retrieval, &m.cfg.band_names(), DistanceFn::Haversine)
            .unwrap();
        assert!(plan.bands.iter().flat_map(|b| &b.stations).all(|n| split.train_station_ids.contains(&n.id)));
        for &t0 in window_origins(table, shape, Some(test)).iter().take(3) {
            for c in [24, 8, 0] {
                let rows = table.contiguous(t0 - c as i64, c).unwrap_or(0..0);
                let ctx: Vec<f64> = table.values[rows].iter().flat_map(|r| m.norm.normalize(r)).collect();
                let single = forecast_zero_shot(&m, &ds, &st, &ctx, Some(&plan), t0).unwrap();
                let batched = m.predict(&asm.batch(&[(t0, idx)], c).unwrap()).unwrap();
                assert_eq!(single.mean().len(), m.cfg.ly);
                for (a, b) in single.mean().iter().zip(batched[0].mean()) {
                    assert!((a - b).abs() < 1e-9, "{id} t0 {t0} c {c}: {a} vs {b}");
                }
            }
        }
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let (ds, split) = data(3);
    let a = trained(&ds, &split, HeadKind::Deterministic, 3).to_checkpoint().to_bytes();
    let b = trained(&ds, &split, HeadKind::Deterministic, 3).to_checkpoint().to_bytes();
    let c = trained(&ds, &split, HeadKind::Deterministic, 4).to_checkpoint().to_bytes();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn shorter_context_changes_only_the_target_inputs() {
    let (ds, split) = data(4);
    let m = trained(&ds, &split, HeadKind::Deterministic, 4);
    let full = evaluate_model(&m, &ds, &split, &split.test_station_ids, &opts(), "96").unwrap();
    let none = evaluate_model(
        &m,
        &ds,
        &split,
        &split.test_station_ids,
        &EvalOptions {
            context_len: Some(0),
            ..opts()
        },
        "0",
    )
    .unwrap();
    assert_eq!(full.stations.len(), none.stations.len());
    assert!(none.average.mse.is_finite() && full.average.mse.is_finite());
    assert_ne!(full.average.mse, none.average.mse);
}
