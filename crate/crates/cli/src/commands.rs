//! Subcommand bodies. Each writes its artifacts plus `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rarf::data::{
    generate_synthetic, ingest_csv, window_origins, CoordStats, CsvSchema, Dataset, SplitSpec, TemperatureUnit,
    WindowShape,
};
use rarf::diff::checkpoint::{Checkpoint, VERSION as CHECKPOINT_VERSION};
use rarf::eval::{
    corr_vs_distance, evaluate_baselines, evaluate_model, sweep, EvalOptions, MetricReport, SweepAxis,
};
use rarf::model::{forecast_zero_shot, Forecast, Model};
use rarf::multires::{decompose, reconstruct, BandSpec, WaveletFamily};
use rarf::retrieval::{plan_retrieval, DistanceFn, RetrievalConfig};
use rarf::rng::sha256_hex;
use rarf::train::{train_phase1, train_phase2};
use rarf::{Error, Result};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::{Axis, Command, Common, Family, Stations, Unit};

/// Artifact directory that records a digest of everything written.
struct Out {
    dir: PathBuf,
    artifacts: BTreeMap<String, String>,
}

impl Out {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            artifacts: BTreeMap::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| io(&path, e))?;
        self.artifacts.insert(name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Records a file some other writer produced.
    fn record(&mut self, name: &str) -> Result<()> {
        let path = self.dir.join(name);
        let bytes = fs::read(&path).map_err(|e| io(&path, e))?;
        self.artifacts.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn finish(mut self, command: &str, cfg: &RunConfig) -> Result<()> {
        let manifest = json!({
            "command": command,
            "config_digest": cfg.digest(),
            "seed": cfg.seed,
            "versions": {
                "rarf": env!("CARGO_PKG_VERSION"),
                "checkpoint_format": CHECKPOINT_VERSION,
            },
            "artifacts": self.artifacts,
        });
        self.artifacts.clear();
        self.json("manifest.json", &manifest)?;
        Ok(())
    }
}

/// Prints a result line; a closed stdout is not an error.
fn emit(line: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{line}");
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn setup(common: &Common) -> Result<(RunConfig, Out)> {
    let cfg = RunConfig::load(common.config.as_deref())?.resolve(common.seed)?;
    let out = Out::new(&common.out)?;
    Ok((cfg, out))
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<Model> {
    Model::from_checkpoint(cfg.model.clone(), Checkpoint::load(path)?)
}

fn stations_of(split: &SplitSpec, which: Stations) -> Vec<String> {
    match which {
        Stations::Train => split.train_station_ids.clone(),
        Stations::Val => split.val_station_ids.clone(),
        Stations::Test => split.test_station_ids.clone(),
    }
}

fn eval_opts(cfg: &RunConfig, context: Option<usize>, horizon: Option<usize>) -> EvalOptions {
    EvalOptions {
        context_len: context.or(cfg.eval.context_len),
        horizon: horizon.or(cfg.eval.horizon),
        ..cfg.eval
    }
}

fn report_files(out: &mut Out, report: &MetricReport) -> Result<()> {
    out.json("report.json", report)?;
    let mut csv = Vec::new();
    report.write_per_hour_csv(&mut csv)?;
    out.write("per_hour.csv", &csv)?;
    Ok(())
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSynth { common } => {
            let (cfg, mut out) = setup(&common)?;
            let ds = generate_synthetic(&cfg.synth)?;
            ds.save(&out.dir.join("dataset"))?;
            out.record("dataset/manifest.json")?;
            eprintln!("wrote {} stations", ds.registry.len());
            out.finish("gen-synth", &cfg)
        }
        Command::Ingest {
            common,
            input,
            temperature_unit,
        } => {
            let (cfg, mut out) = setup(&common)?;
            let unit = match temperature_unit {
                Some(Unit::Kelvin) => TemperatureUnit::Kelvin,
                Some(Unit::Fahrenheit) => TemperatureUnit::Fahrenheit,
                None => cfg.data.temperature_unit,
            };
            let ds = ingest_csv(&input, &CsvSchema { temperature_unit: unit })?;
            ds.save(&out.dir.join("dataset"))?;
            out.record("dataset/manifest.json")?;
            eprintln!("ingested {} stations", ds.registry.len());
            out.finish("ingest", &cfg)
        }
        Command::Train { common } => {
            let (cfg, mut out) = setup(&common)?;
            let (ds, split) = cfg.prepared()?;
            let coords = CoordStats::from_stations(ds.stations())?;
            let norm = ds.norm_stats.expect("prepared");
            let mut model = Model::new(cfg.model.clone(), norm, coords, cfg.seed)?;
            let log = train_phase1(&ds, &split, &mut model, &cfg.train)?;
            for e in &log.epochs {
                eprintln!("epoch {} train_loss {:.6} val_mse {:?}", e.epoch, e.train_loss, e.val_mse);
            }
            let bytes = model.to_checkpoint().to_bytes();
            out.write("model.ckpt", &bytes)?;
            out.json("train_log.json", &log)?;
            out.json("split.json", &split)?;
            emit(&format!("checkpoint {}", sha256_hex(&bytes)));
            out.finish("train", &cfg)
        }
        Command::Adapt {
            common,
            checkpoint,
            target,
        } => {
            let (cfg, mut out) = setup(&common)?;
            let (ds, split) = cfg.prepared()?;
            let model = load_model(&cfg, &checkpoint)?;
            let targets = match target {
                Some(t) => vec![t],
                None => split.train_station_ids.clone(),
            };
            let mut logs = Vec::new();
            for t in &targets {
                let (adapted, log) = train_phase2(&ds, &split, &model, t, &cfg.train)?;
                eprintln!("{t}: best epoch {} val_mse {:?}", log.best_epoch, log.best_val_mse);
                out.write(&format!("adapted/{t}.ckpt"), &adapted.to_checkpoint().to_bytes())?;
                logs.push(log);
            }
            out.json("adapt_log.json", &logs)?;
            out.finish("adapt", &cfg)
        }
        Command::Forecast {
            common,
            checkpoint,
            target,
            context_hours,
            origin,
        } => {
            let (cfg, mut out) = setup(&common)?;
            let (ds, split) = cfg.prepared()?;
            let model = load_model(&cfg, &checkpoint)?;
            let mcfg = &model.cfg;
            let st = ds.registry.require(&target)?.clone();
            let table = ds.table(&target).expect("registered");
            let t0 = match origin {
                Some(t) => t,
                None => {
                    let span = ds.hour_span().expect("non-empty");
                    let shape = WindowShape::new(mcfg.lx, mcfg.ly, cfg.eval.stride)?;
                    *window_origins(table, shape, Some(split.periods(span).test))
                        .first()
                        .ok_or_else(|| Error::Data(format!("{target}: no test-period window")))?
                }
            };
            let c = context_hours.unwrap_or(mcfg.lx);
            mcfg.check_context_len(c)?;
            let rows = table
                .contiguous(t0 - c as i64, c)
                .ok_or_else(|| Error::Data(format!("{target}: no gap-free context before hour {t0}")))?;
            let context: Vec<f64> = table.values[rows].iter().flat_map(|r| model.norm.normalize(r)).collect();
            let plan = if mcfg.use_retrieval {
                let candidates = ds.registry.subset(&split.train_station_ids)?;
                Some(plan_retrieval(&st, &candidates, &mcfg.retrieval, &mcfg.band_names(), DistanceFn::Haversine)?)
            } else {
                None
            };
            let f = forecast_zero_shot(&model, &ds, &st, &context, plan.as_ref(), t0)?;
            let truth = table
                .contiguous(t0, mcfg.ly)
                .map(|r| table.values[r].iter().map(|v| v[rarf::data::TARGET]).collect::<Vec<_>>());
            let doc = json!({
                "target": target,
                "origin_hour": t0,
                "context_hours": c,
                "mean": f.mean(),
                "variance": match &f { Forecast::Gaussian(g) => Some(&g.sigma2), Forecast::Point(_) => None },
                "truth": truth,
                "retrieval": plan,
            });
            out.json("forecast.json", &doc)?;
            out.finish("forecast", &cfg)
        }
        Command::Evaluate {
            common,
            checkpoint,
            context_hours,
            horizon,
            stations,
            adapted,
        } => {
            let (cfg, mut out) = setup(&common)?;
            let (ds, split) = cfg.prepared()?;
            let model = load_model(&cfg, &checkpoint)?;
            let opts = eval_opts(&cfg, context_hours, horizon);
            let ids = stations_of(&split, stations);
            let report = match adapted {
                None => evaluate_model(&model, &ds, &split, &ids, &opts, "zero_shot")?,
                Some(dir) => {
                    let mut parts = Vec::new();
                    for id in &ids {
                        let path = dir.join(format!("{id}.ckpt"));
                        let m = if path.exists() { load_model(&cfg, &path)? } else { model.clone() };
                        parts.push(evaluate_model(&m, &ds, &split, std::slice::from_ref(id), &opts, id)?);
                    }
                    MetricReport::merge("adapted", parts)?
                }
            };
            eprintln!("mse {:.4} mae {:.4}", report.average.mse, report.average.mae);
            report_files(&mut out, &report)?;
            out.finish("evaluate", &cfg)
        }
        Command::Retrieve {
            common,
            target,
            band_ks,
        } => {
            let (cfg, mut out) = setup(&common)?;
            let ds = cfg.dataset()?;
            let split = cfg.split(&ds)?;
            let rc = match band_ks {
                Some(ks) => RetrievalConfig {
                    ks,
                    ..cfg.model.retrieval.clone()
                },
                None => cfg.model.retrieval.clone(),
            };
            let names = cfg.model.band_names();
            let st = ds.registry.require(&target)?;
            let candidates = ds.registry.subset(&split.train_station_ids)?;
            let plan = plan_retrieval(st, &candidates, &rc, &names, DistanceFn::Haversine)?;
            emit(&serde_json::to_string(&plan)?);
            out.json("plan.json", &plan)?;
            out.finish("retrieve", &cfg)
        }
        Command::Decompose {
            common,
            input,
            levels,
            family,
        } => {
            let (cfg, mut out) = setup(&common)?;
            let family = match family {
                Family::Haar => WaveletFamily::Haar,
                Family::Db2 => WaveletFamily::Db2,
            };
            let spec = BandSpec::new(levels, family)?;
            let x = read_signal(&input)?;
            let bands = decompose(&x, &spec)?;
            let back = reconstruct(&bands)?;
            let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let doc = json!({
                "levels": levels,
                "family": family,
                "length": x.len(),
                "bands": bands.to_named(),
                "reconstruction_max_abs_error": err,
            });
            emit(&serde_json::to_string(&doc)?);
            out.json("decomposition.json", &doc)?;
            out.finish("decompose", &cfg)
        }
        Command::CorrDist { common, pairs, bin_km } => {
            let (cfg, mut out) = setup(&common)?;
            let ds: Dataset = cfg.dataset()?;
            let spec = cfg
                .model
                .band_spec()
                .ok_or_else(|| Error::Config("corr-dist needs wavelet_levels >= 1".into()))?;
            let table = corr_vs_distance(&ds, &spec, pairs, cfg.seed)?;
            let mut csv = Vec::new();
            table.write_csv(&mut csv)?;
            out.write("corr.csv", &csv)?;
            let crossing: BTreeMap<&str, Option<f64>> = table
                .bands
                .iter()
                .map(|b| (b.as_str(), table.crossing_distance(b, bin_km, 0.5)))
                .collect();
            let summary = json!({
                "bands": table.bands,
                "bin_km": bin_km,
                "crossing_km_at_r_0_5": crossing,
                "max_distance_km": table.max_distance(),
                "pairs": table.rows.len() / table.bands.len().max(1),
                "skipped": table.skipped,
            });
            emit(&serde_json::to_string(&summary)?);
            out.json("corr_summary.json", &summary)?;
            out.finish("corr-dist", &cfg)
        }
        Command::Baseline {
            common,
            context_hours,
            horizon,
        } => {
            let (cfg, mut out) = setup(&common)?;
            let (ds, split) = cfg.prepared()?;
            let opts = eval_opts(&cfg, context_hours, horizon);
            let results =
                evaluate_baselines(&ds, &split, &split.test_station_ids, cfg.model.lx, cfg.model.ly, &opts)?;
            let mut doc = BTreeMap::new();
            for (b, r) in results {
                let v = match r {
                    Ok(rep) => {
                        eprintln!("{}: mse {:.4}", b.name(), rep.average.mse);
                        serde_json::to_value(rep)?
                    }
                    Err(e) => json!({ "error": format!("error[{}]: {e}", e.category()) }),
                };
                doc.insert(b.name(), v);
            }
            out.json("baselines.json", &doc)?;
            out.finish("baseline", &cfg)
        }
        Command::Sweep {
            common,
            checkpoint,
            axis,
            values,
        } => {
            let (cfg, mut out) = setup(&common)?;
            let (ds, split) = cfg.prepared()?;
            let model = load_model(&cfg, &checkpoint)?;
            let axis = match axis {
                Axis::Horizon => SweepAxis::Horizon,
                Axis::Context => SweepAxis::ContextLen,
            };
            let s = sweep(&model, &ds, &split, &split.test_station_ids, axis, &values, &cfg.eval)?;
            for (v, why) in &s.skipped {
                eprintln!("skipped {v}: {why}");
            }
            for (v, r) in &s.points {
                eprintln!("{v}: mse {:.4}", r.average.mse);
            }
            out.json("sweep.json", &s)?;
            out.finish("sweep", &cfg)
        }
    }
}

/// One value per line (or the first column of a CSV); a non-numeric first
/// line is taken as a header.
fn read_signal(path: &Path) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = rec.get(0).unwrap_or("").trim();
        match field.parse::<f64>() {
            Ok(v) if v.is_finite() => out.push(v),
            _ if i == 0 => continue,
            _ => {
                return Err(Error::Parse {
                    line: i as u64 + 1,
                    message: format!("not a number: {field:?}"),
                })
            }
        }
    }
    Ok(out)
}
