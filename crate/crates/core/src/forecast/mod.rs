//! Frozen backbone forecasters: ridge OLS, DLinear and a small shared MLP.
//!
//! Every backbone maps `[B, L, V]` to `[B, H, V]` and is differentiable with
//! respect to its input on a [`Tape`]; its own parameters only ever enter the
//! tape as constants.

mod dlinear;
mod mlp;
mod ols;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{ChannelMap, Tape, Var};
use crate::container::Container;
use crate::data::Windows;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use dlinear::{moving_average_matrix, decompose};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GCALCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForecasterKind {
    Ols,
    Dlinear,
    Mlp,
}

impl ForecasterKind {
    pub const ALL: [ForecasterKind; 3] = [ForecasterKind::Ols, ForecasterKind::Dlinear, ForecasterKind::Mlp];

    pub fn as_str(self) -> &'static str {
        match self {
            ForecasterKind::Ols => "ols",
            ForecasterKind::Dlinear => "dlinear",
            ForecasterKind::Mlp => "mlp",
        }
    }

    fn code(self) -> u64 {
        match self {
            ForecasterKind::Ols => 1,
            ForecasterKind::Dlinear => 2,
            ForecasterKind::Mlp => 3,
        }
    }

    fn from_code(c: u64) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == c)
    }
}

impl std::fmt::Display for ForecasterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ForecasterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ols" => Ok(ForecasterKind::Ols),
            "dlinear" => Ok(ForecasterKind::Dlinear),
            "mlp" => Ok(ForecasterKind::Mlp),
            other => Err(Error::invalid(format!("unknown backbone '{other}' (ols, dlinear, mlp)"))),
        }
    }
}

/// Offline training hyperparameters. Each backbone reads only its own fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub ridge_lambda: f64,
    pub kernel: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            ridge_lambda: 1e-3,
            kernel: 25,
            hidden: 64,
            epochs: 5,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forecaster {
    kind: ForecasterKind,
    seq_len: usize,
    horizon: usize,
    vars: usize,
    /// Moving-average kernel for DLinear, 0 otherwise.
    kernel: usize,
    /// Free-form note on the data the parameters were fit on (dataset, split, normalization).
    provenance: String,
    params: Vec<(String, Tensor)>,
    /// Effective time map for the linear kinds, derived from `params`.
    map: Option<Arc<ChannelMap>>,
}

impl Forecaster {
    fn from_params(
        kind: ForecasterKind,
        dims: (usize, usize, usize),
        kernel: usize,
        provenance: String,
        params: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        let (seq_len, horizon, vars) = dims;
        let mut f = Forecaster {
            kind,
            seq_len,
            horizon,
            vars,
            kernel,
            provenance,
            params,
            map: None,
        };
        f.map = match kind {
            ForecasterKind::Ols => Some(Arc::new(ols::channel_map(&f)?)),
            ForecasterKind::Dlinear => Some(Arc::new(dlinear::channel_map(&f)?)),
            ForecasterKind::Mlp => {
                mlp::check_shapes(&f)?;
                None
            }
        };
        Ok(f)
    }

    pub fn kind(&self) -> ForecasterKind {
        self.kind
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn vars(&self) -> usize {
        self.vars
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn set_provenance(&mut self, provenance: impl Into<String>) {
        self.provenance = provenance.into();
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub(crate) fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::invalid(format!("{} forecaster has no parameter '{name}'", self.kind)))
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Hex SHA-256 over parameter names, shapes and bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Records the forward pass on `x`'s tape; gradients flow to `x` only.
    pub fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let sh = x.shape();
        if sh.len() != 3 || sh[1] != self.seq_len || sh[2] != self.vars {
            return Err(Error::shape(
                "predict",
                &sh,
                &[0, self.seq_len, self.vars],
            ));
        }
        match &self.map {
            Some(map) => x.channel_linear(map),
            None => mlp::forward(self, x),
        }
    }

    /// `[B, L, V] -> [B, H, V]` without keeping a graph around.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let y = self.forward(tape.constant(x.clone()))?;
        Ok(y.to_tensor())
    }

    pub fn to_container(&self) -> Container {
        Container {
            magic: *CHECKPOINT_MAGIC,
            version: CHECKPOINT_VERSION,
            header: vec![
                self.kind.code(),
                self.seq_len as u64,
                self.horizon as u64,
                self.vars as u64,
                self.kernel as u64,
            ],
            metadata: self.provenance.clone(),
            blobs: self.params.clone(),
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let c = Container::load(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let err = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let [code, l, h, v, k] = c.header[..] else {
            return Err(err(format!("expected 5 header fields, found {}", c.header.len())));
        };
        let kind = ForecasterKind::from_code(code).ok_or_else(|| err(format!("unknown kind code {code}")))?;
        Self::from_params(kind, (l as usize, h as usize, v as usize), k as usize, c.metadata, c.blobs)
            .map_err(|e| err(format!("dimension mismatch: {e}")))
    }

    /// Checks the checkpoint dimensions against the run configuration.
    pub fn expect_dims(&self, seq_len: usize, horizon: usize, vars: usize) -> Result<()> {
        if (self.seq_len, self.horizon, self.vars) != (seq_len, horizon, vars) {
            return Err(Error::invalid(format!(
                "forecaster is L={} H={} V={}, configuration asks for L={seq_len} H={horizon} V={vars}",
                self.seq_len, self.horizon, self.vars
            )));
        }
        Ok(())
    }
}

/// Conventional checkpoint location under `dir`.
pub fn checkpoint_path(dir: &Path, dataset: &str, kind: ForecasterKind, seq_len: usize, horizon: usize) -> std::path::PathBuf {
    dir.join(format!("{dataset}_{kind}_L{seq_len}_H{horizon}.ckpt"))
}

/// Fits a backbone of `kind` on `train`.
pub fn fit(kind: ForecasterKind, train: &Windows<'_>, cfg: &TrainConfig) -> Result<Forecaster> {
    if train.is_empty() {
        return Err(Error::invalid("no training windows"));
    }
    match kind {
        ForecasterKind::Ols => fit_ols(train, cfg.ridge_lambda),
        ForecasterKind::Dlinear => fit_dlinear(train, cfg),
        ForecasterKind::Mlp => fit_mlp(train, cfg),
    }
}

pub use dlinear::fit_dlinear;
pub use mlp::fit_mlp;
pub use ols::fit_ols;

fn provenance_of(train: &Windows<'_>) -> String {
    let ds = train.dataset();
    match ds.split() {
        Some(s) => format!(
            "dataset={} train_end={} val_end={} normalized={}",
            ds.name(),
            s.train_end,
            s.val_end,
            ds.norm().is_some()
        ),
        None => format!("dataset={}", ds.name()),
    }
}

/// Mean squared error of `f` over every window in `w`, in batches.
pub fn evaluate_mse(f: &Forecaster, w: &Windows<'_>) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::invalid("no windows to evaluate"));
    }
    let mut sse = 0.0;
    let mut n = 0usize;
    let idx: Vec<usize> = (0..w.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, y) = w.batch(chunk);
        let p = f.predict(&x)?;
        sse += p.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        n += y.len();
    }
    Ok(sse / n as f64)
}

#[cfg(test)]
mod tests;
