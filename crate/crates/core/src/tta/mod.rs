//! Online test-time adaptation over a chronological test stream.
//!
//! At every step `s` the engine first applies the adaptation events whose
//! labels have just become available, then forecasts `t* = s` from the rows
//! before `s`. A forecast issued at `t*` has `clamp(s - t*, 0, H)` target
//! steps observed at step `s`; it triggers a partial event once
//! `min(period, H)` steps are in and a total event once all `H` are.
//! Due events are pooled and flushed as one batch every `adapt_every` steps
//! (by default the dominant period), each forecast contributing whatever
//! part of its target is observed at the flush step. With `adapt_every = 1`
//! every step's events are applied at once.

mod calendar;
mod period;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use calendar::{LabelCalendar, ObservedStream};
pub use period::dominant_period;

use crate::autograd::{Tape, Var};
use crate::calibration::{dense_param_count, petsa_param_count, CalibrationModule, DenseCalibration, Side};
use crate::data::{Dataset, Part};
use crate::error::{Error, Result};
use crate::forecast::Forecaster;
use crate::losses::{mse, petsa_loss, LossConfig, LossMode, LossReport};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Frozen,
    /// Dense output map adapted with MSE; a simplified TAFAS-like baseline.
    DenseMse,
    Petsa,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Frozen, Method::DenseMse, Method::Petsa];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Frozen => "frozen",
            Method::DenseMse => "dense_mse",
            Method::Petsa => "petsa",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(Method::Frozen),
            "dense_mse" | "dense" => Ok(Method::DenseMse),
            "petsa" => Ok(Method::Petsa),
            other => Err(Error::invalid(format!("unknown method '{other}' (frozen, dense_mse, petsa)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub optimizer: OptimizerKind,
    /// Zero is allowed and freezes the modules at their initialization.
    pub lr: f64,
    pub steps_per_event: usize,
    /// Pending events are flushed as one batch every this many steps;
    /// `None` uses the dominant period.
    pub adapt_every: Option<usize>,
    pub rank: usize,
    pub alpha0: f64,
    pub loss: LossConfig,
    pub period_cap: usize,
    /// Overrides the FFT estimate when set.
    pub period: Option<usize>,
    pub seed: u64,
    /// Runs abort when an adaptation loss exceeds this.
    pub abort_loss: f64,
    /// Replace unobserved rows by NaN instead of refusing to read them.
    pub poison: bool,
    /// Keep every calibrated forecast in the report.
    pub store_predictions: bool,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            steps_per_event: 1,
            adapt_every: None,
            rank: 4,
            alpha0: 0.5,
            loss: LossConfig::default(),
            period_cap: 168,
            period: None,
            seed: 0,
            abort_loss: 1e6,
            poison: false,
            store_predictions: false,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.steps_per_event == 0 {
            return Err(Error::invalid("steps_per_event must be >= 1"));
        }
        if self.adapt_every == Some(0) {
            return Err(Error::invalid("adapt_every must be >= 1"));
        }
        if self.rank == 0 {
            return Err(Error::invalid("rank must be >= 1"));
        }
        if self.period == Some(0) {
            return Err(Error::invalid("period must be >= 1"));
        }
        Ok(())
    }
}

/// One forecast's contribution to an adaptation event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventPart {
    pub t_star: usize,
    pub n_observed: usize,
    /// Objective value before the event's first update.
    pub loss: f64,
    /// Term breakdown; absent for the MSE-only baseline.
    pub report: Option<LossReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationEvent {
    pub step: usize,
    pub partial: Vec<EventPart>,
    pub total: Vec<EventPart>,
    pub updates: usize,
}

/// Per-window squared and absolute error sums, in stream order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowErrors {
    pub t_star: Vec<usize>,
    pub sse: Vec<f64>,
    pub sae: Vec<f64>,
    /// Squared error of the uncalibrated backbone on the same window.
    pub backbone_sse: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub adapt_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub dataset: String,
    pub backbone: String,
    pub seq_len: usize,
    pub horizon: usize,
    pub vars: usize,
    pub period: usize,
    /// Observed steps that trigger a partial event; `None` when it would coincide with the total event.
    pub partial_threshold: Option<usize>,
    /// Steps between flushes of pending adaptation events.
    pub adapt_every: usize,
    pub config: AdaptationConfig,
    pub n_windows: usize,
    /// Normalized-space test MSE accumulated while streaming.
    pub mse: f64,
    pub mae: f64,
    pub backbone_mse: f64,
    pub trainable_params: usize,
    pub backbone_params: usize,
    pub backbone_checksum: String,
    pub backbone_unchanged: bool,
    pub windows: WindowErrors,
    /// Flattened `[n_windows, H, V]` calibrated forecasts when requested.
    pub predictions: Option<Vec<f64>>,
    pub events: Vec<AdaptationEvent>,
    #[serde(skip)]
    pub timing: Timing,
    #[serde(skip)]
    pub modules: Option<[CalibrationModule; 2]>,
    #[serde(skip)]
    pub dense: Option<DenseCalibration>,
}

impl RunReport {
    /// Element count behind `mse` and `mae`.
    pub fn n_values(&self) -> usize {
        self.n_windows * self.horizon * self.vars
    }
}

enum Adapter {
    Frozen,
    Petsa([CalibrationModule; 2]),
    Dense(DenseCalibration),
}

impl Adapter {
    fn trainable_params(&self) -> usize {
        match self {
            Adapter::Frozen => 0,
            Adapter::Petsa(m) => m.iter().map(CalibrationModule::param_count).sum(),
            Adapter::Dense(d) => d.param_count(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Adapter::Frozen => Vec::new(),
            Adapter::Petsa([a, b]) => a.params_mut().iter_mut().chain(b.params_mut().iter_mut()).collect(),
            Adapter::Dense(d) => d.params_mut().iter_mut().collect(),
        }
    }

    /// Trainable leaves on `tape`, in `params_mut` order.
    fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        match self {
            Adapter::Frozen => Vec::new(),
            Adapter::Petsa([a, b]) => a.bind(tape).params.into_iter().chain(b.bind(tape).params).collect(),
            Adapter::Dense(d) => d.bind(tape).to_vec(),
        }
    }

    fn forward<'t>(&self, f: &Forecaster, leaves: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        use crate::calibration::BoundModule;
        match self {
            Adapter::Frozen => f.forward(x),
            Adapter::Petsa(_) => {
                let input = BoundModule {
                    params: [leaves[0], leaves[1], leaves[2], leaves[3]],
                };
                let output = BoundModule {
                    params: [leaves[4], leaves[5], leaves[6], leaves[7]],
                };
                output.apply(f.forward(input.apply(x)?)?)
            }
            Adapter::Dense(_) => DenseCalibration::apply([leaves[0], leaves[1]], f.forward(x)?),
        }
    }

    fn predict(&self, f: &Forecaster, x: &Tensor) -> Result<Tensor> {
        match self {
            Adapter::Frozen => f.predict(x),
            Adapter::Petsa([a, b]) => b.calibrate(&f.predict(&a.calibrate(x)?)?),
            Adapter::Dense(d) => d.calibrate(&f.predict(x)?),
        }
    }
}

/// Streams the test split of `ds` through `f`, adapting according to `method`.
pub fn run_tta(ds: &Dataset, f: &Forecaster, cfg: &AdaptationConfig, method: Method) -> Result<RunReport> {
    let started = Instant::now();
    cfg.validate()?;
    let (l, h, v) = (f.seq_len(), f.horizon(), f.vars());
    if ds.vars() != v {
        return Err(Error::invalid(format!(
            "forecaster expects {v} variables, dataset '{}' has {}",
            ds.name(),
            ds.vars()
        )));
    }
    let split = ds.split().ok_or_else(|| Error::invalid("dataset has not been split"))?;
    let test = ds.windows(Part::Test, l, h, 1)?;
    if test.is_empty() {
        return Err(Error::invalid(format!("test split of '{}' is too short for L={l}, H={h}", ds.name())));
    }
    let period = match cfg.period {
        Some(p) => p,
        None => dominant_period(ds.rows_slice(0, split.train_end), v, cfg.period_cap)?,
    };
    let every = cfg.adapt_every.unwrap_or(period);
    let threshold = period.min(h);
    let partial_threshold = (threshold < h).then_some(threshold);
    let checksum = f.checksum();

    let mut adapter = match method {
        Method::Frozen => Adapter::Frozen,
        Method::Petsa => Adapter::Petsa([
            CalibrationModule::init(Side::Input, l, v, cfg.rank, cfg.alpha0, cfg.seed)?,
            CalibrationModule::init(Side::Output, h, v, cfg.rank, cfg.alpha0, cfg.seed.wrapping_add(1))?,
        ]),
        Method::DenseMse => Adapter::Dense(DenseCalibration::init(h, v)?),
    };
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr)?;
    let stream = ObservedStream::new(ds.values(), v, cfg.poison);
    let first = test.t_stars()[0];

    let mut errors = WindowErrors::default();
    let mut predictions = cfg.store_predictions.then(Vec::new);
    let mut events = Vec::new();
    let (mut sse_total, mut sae_total, mut backbone_total) = (0.0, 0.0, 0.0);
    let mut adapt_seconds = 0.0;
    let mut pending = Vec::new();

    for (i, &s) in test.t_stars().iter().enumerate() {
        if method != Method::Frozen {
            if let Some(p) = partial_threshold.filter(|&p| s >= first + p) {
                pending.push((s - p, LossMode::Partial));
            }
            if s >= first + h {
                pending.push((s - h, LossMode::Total));
            }
            if !pending.is_empty() && (s - first + 1) % every == 0 {
                let t0 = Instant::now();
                let due = std::mem::take(&mut pending);
                let event = adapt(&mut adapter, &mut opt, f, &stream, s, &due, cfg, method)
                    .map_err(|e| match e {
                        Error::Aborted { step, reason, .. } => Error::Aborted {
                            step,
                            reason,
                            events: events.clone(),
                        },
                        other => other,
                    })?;
                events.push(event);
                adapt_seconds += t0.elapsed().as_secs_f64();
            }
        }

        let x = Tensor::new(&[1, l, v], stream.rows(s - l, l, s)?)?;
        let raw = f.predict(&x)?;
        let pred = match method {
            Method::Frozen => raw.clone(),
            _ => adapter.predict(f, &x)?,
        };
        let truth = test.target(i);
        let (mut sse, mut sae, mut bsse) = (0.0, 0.0, 0.0);
        for ((p, r), y) in pred.data().iter().zip(raw.data()).zip(truth) {
            sse += (p - y) * (p - y);
            sae += (p - y).abs();
            bsse += (r - y) * (r - y);
        }
        sse_total += sse;
        sae_total += sae;
        backbone_total += bsse;
        errors.t_star.push(s);
        errors.sse.push(sse);
        errors.sae.push(sae);
        errors.backbone_sse.push(bsse);
        if let Some(buf) = predictions.as_mut() {
            buf.extend_from_slice(pred.data());
        }
    }

    let n = (test.len() * h * v) as f64;
    let trainable_params = adapter.trainable_params();
    let (modules, dense) = match adapter {
        Adapter::Petsa(m) => (Some(m), None),
        Adapter::Dense(d) => (None, Some(d)),
        Adapter::Frozen => (None, None),
    };
    Ok(RunReport {
        method,
        dataset: ds.name().to_string(),
        backbone: f.kind().to_string(),
        seq_len: l,
        horizon: h,
        vars: v,
        period,
        partial_threshold,
        adapt_every: every,
        config: cfg.clone(),
        n_windows: test.len(),
        mse: sse_total / n,
        mae: sae_total / n,
        backbone_mse: backbone_total / n,
        trainable_params,
        backbone_params: f.param_count(),
        backbone_unchanged: f.checksum() == checksum,
        backbone_checksum: checksum,
        windows: errors,
        predictions,
        events,
        timing: Timing {
            adapt_seconds,
            total_seconds: started.elapsed().as_secs_f64(),
        },
        modules,
        dense,
    })
}

/// Runs `steps_per_event` updates on the forecasts in `due`, all seen at step `s`.
///
/// The objective is the mean loss over the partial forecasts plus the mean
/// over the total ones.
#[allow(clippy::too_many_arguments)]
fn adapt(
    adapter: &mut Adapter,
    opt: &mut Optimizer,
    f: &Forecaster,
    stream: &ObservedStream<'_>,
    s: usize,
    due: &[(usize, LossMode)],
    cfg: &AdaptationConfig,
    method: Method,
) -> Result<AdaptationEvent> {
    let (l, v) = (f.seq_len(), f.vars());
    let calendar = LabelCalendar::new(f.horizon());
    let mut event = AdaptationEvent {
        step: s,
        partial: Vec::new(),
        total: Vec::new(),
        updates: 0,
    };
    for k in 0..cfg.steps_per_event {
        let tape = Tape::new();
        let leaves = adapter.bind(&tape);
        let mut sums: [Option<Var>; 2] = [None, None];
        let mut counts = [0usize; 2];
        let mut parts = Vec::with_capacity(due.len());
        for &(t_star, mode) in due {
            let p = calendar.observed(t_star, s);
            let x = tape.constant(Tensor::new(&[1, l, v], stream.rows(t_star - l, l, s)?)?);
            let y = Tensor::new(&[1, p, v], stream.rows(t_star, p, s)?)?;
            let pred = adapter.forward(f, &leaves, x)?;
            let (loss, report) = match method {
                Method::Petsa => {
                    let (loss, rep) = petsa_loss(pred, &y, &cfg.loss, mode)?;
                    (loss, Some(rep))
                }
                _ => (mse(pred.narrow(1, 0, p)?, tape.constant(y))?, None),
            };
            parts.push((mode, EventPart {
                t_star,
                n_observed: p,
                loss: loss.item(),
                report,
            }));
            let slot = (mode == LossMode::Total) as usize;
            counts[slot] += 1;
            sums[slot] = Some(match sums[slot].take() {
                None => loss,
                Some(acc) => acc.add(loss)?,
            });
        }
        let mut objective: Option<Var> = None;
        for (sum, n) in sums.into_iter().zip(counts) {
            let Some(sum) = sum else { continue };
            let mean = if n > 1 { sum.scale(1.0 / n as f64) } else { sum };
            objective = Some(match objective {
                None => mean,
                Some(acc) => acc.add(mean)?,
            });
        }
        let objective = objective.expect("at least one due forecast");
        let value = objective.item();
        if !value.is_finite() || value > cfg.abort_loss {
            return Err(Error::Aborted {
                step: s,
                reason: format!("adaptation loss {value} (limit {})", cfg.abort_loss),
                events: Vec::new(),
            });
        }
        if k == 0 {
            for (mode, part) in parts {
                match mode {
                    LossMode::Partial => event.partial.push(part),
                    LossMode::Total => event.total.push(part),
                }
            }
        }
        let grads = tape.backward(objective)?;
        let grads: Vec<Tensor> = leaves.iter().map(|&p| grads.get_or_zeros(p)).collect();
        opt.step(&mut adapter.params_mut(), &grads)?;
        event.updates += 1;
    }
    Ok(event)
}

/// The three methods on one backbone under identical seeds and calendars.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub runs: Vec<RunReport>,
}

impl Comparison {
    pub fn get(&self, method: Method) -> Option<&RunReport> {
        self.runs.iter().find(|r| r.method == method)
    }

    /// Dense-baseline parameters over PETSA parameters.
    pub fn param_ratio(&self) -> Option<f64> {
        let d = self.get(Method::DenseMse)?.trainable_params as f64;
        let p = self.get(Method::Petsa)?.trainable_params as f64;
        Some(d / p)
    }
}

pub fn compare_methods(ds: &Dataset, f: &Forecaster, cfg: &AdaptationConfig) -> Result<Comparison> {
    let runs = Method::ALL
        .iter()
        .map(|&m| run_tta(ds, f, cfg, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison { runs })
}

/// Closed-form trainable parameter counts `(petsa, dense)` for one configuration.
pub fn param_counts(seq_len: usize, horizon: usize, vars: usize, rank: usize) -> (usize, usize) {
    (
        petsa_param_count(seq_len, vars, rank) + petsa_param_count(horizon, vars, rank),
        dense_param_count(horizon, vars),
    )
}
