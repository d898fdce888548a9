use std::path::PathBuf;

use gatecal::data::{load_csv, Dataset, Part, SplitRatios};
use gatecal::forecast::{checkpoint_path, evaluate_mse, fit, Forecaster};
use gatecal::tta::{run_tta, AdaptationConfig, Method};
use gatecal::container::write_atomic;
use log::info;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::failure::Failure;
use crate::output::{results_dir, sweep_dir, write_tables, ResultFile, SweepPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepAxis {
    Beta,
    Rank,
    Alpha0,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Beta => "beta",
            SweepAxis::Rank => "rank",
            SweepAxis::Alpha0 => "alpha0",
        }
    }

    fn values(self, cfg: &ExperimentConfig) -> Vec<f64> {
        match self {
            SweepAxis::Beta => cfg.sweep_beta.clone(),
            SweepAxis::Rank => cfg.sweep_rank.iter().map(|&r| r as f64).collect(),
            SweepAxis::Alpha0 => cfg.sweep_alpha0.clone(),
        }
    }

    fn apply(self, base: &AdaptationConfig, value: f64) -> AdaptationConfig {
        let mut c = base.clone();
        match self {
            SweepAxis::Beta => c.loss.beta = value,
            SweepAxis::Rank => c.rank = value as usize,
            SweepAxis::Alpha0 => c.alpha0 = value,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub horizon: usize,
    pub checkpoint: PathBuf,
    pub val_mse: f64,
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, Failure> {
    let path = cfg.resolve_data_path()?;
    let longest = cfg.horizons.iter().copied().max().unwrap_or(0);
    let ds = load_csv(&path, cfg.seq_len + longest)?;
    let ratios = SplitRatios::for_dataset(ds.name());
    Ok(ds.split_and_normalize(ratios)?)
}

/// Fits one backbone per horizon and writes the checkpoints.
pub fn train(cfg: &ExperimentConfig, force: bool) -> Result<Vec<TrainOutcome>, Failure> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let dir = cfg.checkpoint_dir();
    let paths: Vec<PathBuf> = cfg
        .horizons
        .iter()
        .map(|&h| checkpoint_path(&dir, ds.name(), cfg.backbone, cfg.seq_len, h))
        .collect();
    if !force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(Failure::Usage(format!(
                "checkpoint {} already exists; pass --force to overwrite",
                p.display()
            )));
        }
    }
    cfg.horizons
        .par_iter()
        .zip(paths)
        .map(|(&h, path)| {
            let train = ds.windows(Part::Train, cfg.seq_len, h, 1)?;
            let f = fit(cfg.backbone, &train, &cfg.train).map_err(|e| Failure::from(e).context(format!("H={h}")))?;
            f.save_checkpoint(&path)?;
            let val = ds.windows(Part::Val, cfg.seq_len, h, 1)?;
            let val_mse = if val.is_empty() { f64::NAN } else { evaluate_mse(&f, &val)? };
            info!("trained {} H={h}: validation MSE {val_mse:.4}", cfg.backbone);
            Ok(TrainOutcome {
                horizon: h,
                checkpoint: path,
                val_mse,
            })
        })
        .collect()
}

fn load_backbones(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Vec<Forecaster>, Failure> {
    let dir = cfg.checkpoint_dir();
    cfg.horizons
        .iter()
        .map(|&h| {
            let path = checkpoint_path(&dir, ds.name(), cfg.backbone, cfg.seq_len, h);
            if !path.exists() {
                return Err(Failure::Usage(format!(
                    "no checkpoint at {}; run `gatecal train` first",
                    path.display()
                )));
            }
            let f = Forecaster::load_checkpoint(&path)?;
            if f.kind() != cfg.backbone {
                return Err(Failure::Usage(format!(
                    "{} holds a {} backbone, configuration asks for {}",
                    path.display(),
                    f.kind(),
                    cfg.backbone
                )));
            }
            f.expect_dims(cfg.seq_len, h, ds.vars())
                .map_err(|e| Failure::from(e).context(path.display()))?;
            Ok(f)
        })
        .collect()
}

fn write_resolved(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let path = cfg.output_dir.join("config.resolved");
    write_atomic(&path, cfg.to_text().as_bytes())?;
    Ok(())
}

/// Runs every configured method on every horizon, writes one result file
/// per run and refreshes the tables. Returns the result file paths.
pub fn adapt(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, Failure> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let backbones = load_backbones(cfg, &ds)?;
    let jobs: Vec<(&Forecaster, Method)> = backbones
        .iter()
        .flat_map(|f| cfg.methods.iter().map(move |&m| (f, m)))
        .collect();
    let out = results_dir(&cfg.output_dir);
    let paths = jobs
        .par_iter()
        .map(|&(f, method)| {
            let ctx = format!("{method} H={}", f.horizon());
            let report = run_tta(&ds, f, &cfg.adapt, method).map_err(|e| Failure::from(e).context(&ctx))?;
            info!("{ctx}: MSE {:.4} MAE {:.4}", report.mse, report.mae);
            ResultFile::new(report, None).write(&out)
        })
        .collect::<Result<Vec<_>, _>>()?;
    write_resolved(cfg)?;
    write_tables(&cfg.output_dir)?;
    Ok(paths)
}

/// One PETSA run per (axis value, horizon), everything else fixed.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis) -> Result<Vec<PathBuf>, Failure> {
    cfg.validate()?;
    let values = axis.values(cfg);
    if values.is_empty() {
        return Err(Failure::Usage(format!("sweep_{} is empty", axis.as_str())));
    }
    for &v in &values {
        axis.apply(&cfg.adapt, v).validate().map_err(|e| Failure::Usage(format!("sweep value {v}: {e}")))?;
    }
    let ds = load_dataset(cfg)?;
    let backbones = load_backbones(cfg, &ds)?;
    let jobs: Vec<(&Forecaster, f64)> = backbones
        .iter()
        .flat_map(|f| values.iter().map(move |&v| (f, v)))
        .collect();
    let out = sweep_dir(&cfg.output_dir, axis.as_str());
    let paths = jobs
        .par_iter()
        .map(|&(f, value)| {
            let ctx = format!("{}={value} H={}", axis.as_str(), f.horizon());
            let c = axis.apply(&cfg.adapt, value);
            let report = run_tta(&ds, f, &c, Method::Petsa).map_err(|e| Failure::from(e).context(&ctx))?;
            info!("{ctx}: MSE {:.4}", report.mse);
            let point = SweepPoint {
                axis: axis.as_str().to_string(),
                value,
            };
            ResultFile::new(report, Some(point)).write(&out)
        })
        .collect::<Result<Vec<_>, _>>()?;
    write_resolved(cfg)?;
    write_tables(&cfg.output_dir)?;
    Ok(paths)
}

/// Rebuilds the tables from the result files and returns the MSE summary.
pub fn report(cfg: &ExperimentConfig) -> Result<String, Failure> {
    let written = write_tables(&cfg.output_dir)?;
    if written.is_empty() {
        return Err(Failure::Usage(format!(
            "no result files under {}; run `gatecal adapt` first",
            cfg.output_dir.display()
        )));
    }
    let summary = cfg.output_dir.join("summary_mse.tsv");
    Ok(std::fs::read_to_string(&summary).unwrap_or_default())
}
