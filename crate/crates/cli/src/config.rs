//! Flat `key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gatecal::forecast::{ForecasterKind, TrainConfig};
use gatecal::tta::{AdaptationConfig, Method};

use crate::failure::Failure;

/// Directory searched for `<dataset>.csv` when `data_path` is not set.
pub const DATA_DIR_ENV: &str = "GATECAL_DATA_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: String,
    /// Explicit CSV; otherwise `$GATECAL_DATA_DIR/<dataset>.csv`.
    pub data_path: Option<PathBuf>,
    pub backbone: ForecasterKind,
    pub seq_len: usize,
    pub horizons: Vec<usize>,
    pub methods: Vec<Method>,
    pub output_dir: PathBuf,
    pub checkpoint_dir: Option<PathBuf>,
    pub train: TrainConfig,
    pub adapt: AdaptationConfig,
    pub sweep_beta: Vec<f64>,
    pub sweep_rank: Vec<usize>,
    pub sweep_alpha0: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: "ETTh1".into(),
            data_path: None,
            backbone: ForecasterKind::Ols,
            seq_len: 96,
            horizons: vec![96, 192, 336, 720],
            methods: Method::ALL.to_vec(),
            output_dir: PathBuf::from("runs"),
            checkpoint_dir: None,
            train: TrainConfig::default(),
            adapt: AdaptationConfig::default(),
            sweep_beta: vec![0.0, 0.1, 0.5, 1.0],
            sweep_rank: vec![1, 2, 4, 8, 16],
            sweep_alpha0: vec![0.01, 0.1, 0.5, 1.0, 2.0],
        }
    }
}

pub const KEYS: &[&str] = &[
    "dataset",
    "data_path",
    "backbone",
    "seq_len",
    "horizons",
    "methods",
    "output_dir",
    "checkpoint_dir",
    "seed",
    "ridge_lambda",
    "kernel",
    "hidden",
    "epochs",
    "train_lr",
    "batch_size",
    "optimizer",
    "lr",
    "steps_per_event",
    "adapt_every",
    "rank",
    "alpha0",
    "delta",
    "beta",
    "patch_len",
    "patch_stride",
    "use_freq",
    "period_cap",
    "period",
    "abort_loss",
    "poison",
    "store_predictions",
    "sweep_beta",
    "sweep_rank",
    "sweep_alpha0",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: cannot parse '{value}'"))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, String> {
    let items = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<Vec<T>, _>>()?;
    if items.is_empty() {
        return Err(format!("{key}: empty list"));
    }
    Ok(items)
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn optional<T: ToString>(x: &Option<T>, none: &str) -> String {
    x.as_ref().map_or_else(|| none.to_string(), T::to_string)
}

impl ExperimentConfig {
    /// Reads a config file; a missing file is a usage error.
    pub fn from_file(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
    }

    pub fn from_text(text: &str) -> Result<Self, String> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", n + 1))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(format!("line {}: duplicate key '{key}'", n + 1));
            }
            cfg.set(key, value.trim()).map_err(|e| format!("line {}: {e}", n + 1))?;
        }
        Ok(cfg)
    }

    /// Applies `key=value` overrides from the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), Failure> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Failure::Usage(format!("--set expects key=value, got '{o}'")))?;
            self.set(k.trim(), v.trim()).map_err(Failure::Usage)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let a = &mut self.adapt;
        let t = &mut self.train;
        match key {
            "dataset" => self.dataset = value.to_string(),
            "data_path" => self.data_path = (!value.is_empty()).then(|| PathBuf::from(value)),
            "backbone" => self.backbone = value.parse().map_err(|e| format!("{key}: {e}"))?,
            "seq_len" => self.seq_len = parse(key, value)?,
            "horizons" => self.horizons = parse_list(key, value)?,
            "methods" => {
                self.methods = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<Method>().map_err(|e| format!("{key}: {e}")))
                    .collect::<Result<_, _>>()?
            }
            "output_dir" => self.output_dir = PathBuf::from(value),
            "checkpoint_dir" => self.checkpoint_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "seed" => {
                let seed = parse(key, value)?;
                t.seed = seed;
                a.seed = seed;
            }
            "ridge_lambda" => t.ridge_lambda = parse(key, value)?,
            "kernel" => t.kernel = parse(key, value)?,
            "hidden" => t.hidden = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "train_lr" => t.lr = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "optimizer" => a.optimizer = value.parse().map_err(|e| format!("{key}: {e}"))?,
            "lr" => a.lr = parse(key, value)?,
            "steps_per_event" => a.steps_per_event = parse(key, value)?,
            "adapt_every" => {
                a.adapt_every = match value {
                    "" | "period" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "rank" => a.rank = parse(key, value)?,
            "alpha0" => a.alpha0 = parse(key, value)?,
            "delta" => a.loss.delta = parse(key, value)?,
            "beta" => a.loss.beta = parse(key, value)?,
            "patch_len" => a.loss.patch_len = parse(key, value)?,
            "patch_stride" => {
                a.loss.patch_stride = match value {
                    "" | "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "use_freq" => a.loss.use_freq = parse(key, value)?,
            "period_cap" => a.period_cap = parse(key, value)?,
            "period" => {
                a.period = match value {
                    "" | "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "abort_loss" => a.abort_loss = parse(key, value)?,
            "poison" => a.poison = parse(key, value)?,
            "store_predictions" => a.store_predictions = parse(key, value)?,
            "sweep_beta" => self.sweep_beta = parse_list(key, value)?,
            "sweep_rank" => self.sweep_rank = parse_list(key, value)?,
            "sweep_alpha0" => self.sweep_alpha0 = parse_list(key, value)?,
            other => return Err(format!("unknown key '{other}'")),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a form `from_text` reads back.
    pub fn to_text(&self) -> String {
        let (a, t) = (&self.adapt, &self.train);
        let pairs: Vec<(&str, String)> = vec![
            ("dataset", self.dataset.clone()),
            ("data_path", self.data_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("backbone", self.backbone.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("horizons", join(&self.horizons)),
            ("methods", join(&self.methods)),
            ("output_dir", self.output_dir.display().to_string()),
            ("checkpoint_dir", self.checkpoint_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("seed", a.seed.to_string()),
            ("ridge_lambda", t.ridge_lambda.to_string()),
            ("kernel", t.kernel.to_string()),
            ("hidden", t.hidden.to_string()),
            ("epochs", t.epochs.to_string()),
            ("train_lr", t.lr.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("optimizer", a.optimizer.to_string()),
            ("lr", a.lr.to_string()),
            ("steps_per_event", a.steps_per_event.to_string()),
            ("adapt_every", optional(&a.adapt_every, "period")),
            ("rank", a.rank.to_string()),
            ("alpha0", a.alpha0.to_string()),
            ("delta", a.loss.delta.to_string()),
            ("beta", a.loss.beta.to_string()),
            ("patch_len", a.loss.patch_len.to_string()),
            ("patch_stride", optional(&a.loss.patch_stride, "auto")),
            ("use_freq", a.loss.use_freq.to_string()),
            ("period_cap", a.period_cap.to_string()),
            ("period", optional(&a.period, "auto")),
            ("abort_loss", a.abort_loss.to_string()),
            ("poison", a.poison.to_string()),
            ("store_predictions", a.store_predictions.to_string()),
            ("sweep_beta", join(&self.sweep_beta)),
            ("sweep_rank", join(&self.sweep_rank)),
            ("sweep_alpha0", join(&self.sweep_alpha0)),
        ];
        debug_assert_eq!(pairs.len(), KEYS.len());
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let usage = |m: String| Failure::Usage(m);
        if self.horizons.contains(&0) {
            return Err(usage("horizons must be positive".into()));
        }
        if self.seq_len == 0 {
            return Err(usage("seq_len must be positive".into()));
        }
        if self.methods.is_empty() {
            return Err(usage("methods must not be empty".into()));
        }
        self.adapt.validate().map_err(|e| usage(e.to_string()))?;
        Ok(())
    }

    pub fn resolve_data_path(&self) -> Result<PathBuf, Failure> {
        let path = match &self.data_path {
            Some(p) => p.clone(),
            None => {
                let dir = std::env::var_os(DATA_DIR_ENV).ok_or_else(|| {
                    Failure::Usage(format!(
                        "no data_path set and {DATA_DIR_ENV} is unset; cannot locate {}.csv",
                        self.dataset
                    ))
                })?;
                PathBuf::from(dir).join(format!("{}.csv", self.dataset))
            }
        };
        if !path.is_file() {
            return Err(Failure::Usage(format!("dataset file {} does not exist", path.display())));
        }
        Ok(path)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint_dir.clone().unwrap_or_else(|| self.output_dir.join("checkpoints"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("beta", "0.25").unwrap();
        cfg.set("period", "24").unwrap();
        cfg.set("adapt_every", "1").unwrap();
        cfg.set("methods", "petsa,frozen").unwrap();
        cfg.set("data_path", "/tmp/x.csv").unwrap();
        let back = ExperimentConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        for line in cfg.to_text().lines() {
            let key = line.split_once(" = ").unwrap().0;
            assert!(KEYS.contains(&key), "{key}");
        }
    }

    #[test]
    fn comments_overrides_and_errors() {
        let mut cfg = ExperimentConfig::from_text("# experiment\nrank = 8  # wider\n\nhorizons = 96, 192\n").unwrap();
        assert_eq!(cfg.adapt.rank, 8);
        assert_eq!(cfg.horizons, vec![96, 192]);
        cfg.apply_overrides(&["rank=2".into(), "seed = 7".into()]).unwrap();
        assert_eq!((cfg.adapt.rank, cfg.adapt.seed, cfg.train.seed), (2, 7, 7));
        assert!(ExperimentConfig::from_text("rank = 1\nrank = 2").unwrap_err().contains("duplicate"));
        assert!(ExperimentConfig::from_text("colour = red").unwrap_err().contains("unknown key"));
        assert!(ExperimentConfig::from_text("rank four").is_err());
        assert!(ExperimentConfig::from_text("sweep_rank = ").is_err());
        assert!(cfg.apply_overrides(&["rank".into()]).is_err());
    }
}
