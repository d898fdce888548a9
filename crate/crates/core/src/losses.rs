//! Adaptation objectives over `[B, S, V]` forecasts.
//!
//! The combined objective is `huber + patch + beta * freq`, evaluated either on
//! the observed prefix of the horizon (partial mode) or on the whole horizon
//! (total mode). Every term is a mean, so `beta` keeps the same meaning across
//! horizon lengths.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Huber threshold.
    pub delta: f64,
    /// Weight of the spectral term.
    pub beta: f64,
    pub patch_len: usize,
    /// Patch stride; `None` means non-overlapping (`patch_len`).
    pub patch_stride: Option<usize>,
    /// When false the spectral term is left out of the graph entirely.
    pub use_freq: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            delta: 0.5,
            beta: 0.1,
            patch_len: 16,
            patch_stride: None,
            use_freq: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(Error::invalid(format!("delta must be > 0, got {}", self.delta)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::invalid(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.patch_len == 0 || self.patch_stride == Some(0) {
            return Err(Error::invalid("patch length and stride must be >= 1"));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.patch_stride.unwrap_or(self.patch_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Partial,
    Total,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mode: LossMode,
    pub total: f64,
    pub huber: f64,
    pub freq: f64,
    pub patch: f64,
    /// Horizon steps the loss actually saw.
    pub n_observed: usize,
    /// Set when the observed prefix is shorter than one patch.
    pub patch_skipped: bool,
}

fn same_shape(op: &'static str, a: Var<'_>, b: Var<'_>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::shape(op, &sa, &sb));
    }
    Ok(())
}

fn time_series_shape(op: &'static str, a: Var<'_>) -> Result<[usize; 3]> {
    match a.shape()[..] {
        [b, s, v] => Ok([b, s, v]),
        ref other => Err(Error::shape(op, other, &[0, 0, 0])),
    }
}

/// Mean elementwise Huber penalty of `pred - target`.
pub fn huber<'t>(pred: Var<'t>, target: Var<'t>, delta: f64) -> Result<Var<'t>> {
    same_shape("huber", pred, target)?;
    Ok(pred.sub(target)?.huber(delta).mean())
}

pub fn mse<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    same_shape("mse", pred, target)?;
    Ok(pred.sub(target)?.square().mean())
}

/// Mean complex modulus of the spectral residual along the time axis.
///
/// The transform is linear, so `F(pred) - F(target)` is computed as `F(pred - target)`.
pub fn freq_loss<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    same_shape("freq_loss", pred, target)?;
    time_series_shape("freq_loss", pred)?;
    let spec = pred.sub(target)?.permute(&[0, 2, 1])?.rdft_packed()?;
    Ok(spec.complex_abs()?.mean())
}

fn patch_terms<'t>(pp: Var<'t>, pt: Var<'t>, axis: usize) -> Result<[Var<'t>; 3]> {
    let corr = pp.pearson(pt)?.scale(-1.0).add_scalar(1.0);
    let mean = pp.mean_axis(axis)?.sub(pt.mean_axis(axis)?)?.square();
    let var = pp.var_axis(axis)?.sub(pt.var_axis(axis)?)?.square();
    Ok([corr, mean, var])
}

/// Patch-wise structural loss: per patch `1 - corr`, squared mean gap and
/// squared variance gap, each averaged over all patches, then summed.
///
/// A trailing remainder shorter than `patch_len` is dropped.
pub fn patch_loss<'t>(
    pred: Var<'t>,
    target: Var<'t>,
    patch_len: usize,
    stride: usize,
) -> Result<Var<'t>> {
    same_shape("patch_loss", pred, target)?;
    let [b, s, v] = time_series_shape("patch_loss", pred)?;
    if patch_len == 0 || stride == 0 || patch_len > s {
        return Err(Error::invalid(format!(
            "patch length {patch_len} (stride {stride}) does not fit a length-{s} series"
        )));
    }
    let n_patches = (s - patch_len) / stride + 1;
    let pp = pred.permute(&[0, 2, 1])?;
    let pt = target.permute(&[0, 2, 1])?;
    if stride == patch_len {
        let cut = n_patches * patch_len;
        let shape = [b, v, n_patches, patch_len];
        let pp = pp.narrow(2, 0, cut)?.reshape(&shape)?;
        let pt = pt.narrow(2, 0, cut)?.reshape(&shape)?;
        let [c, m, var] = patch_terms(pp, pt, 3)?;
        return c.mean().add(m.mean())?.add(var.mean());
    }
    let mut sums: Option<[Var<'t>; 3]> = None;
    for k in 0..n_patches {
        let a = pp.narrow(2, k * stride, patch_len)?;
        let t = pt.narrow(2, k * stride, patch_len)?;
        let terms = patch_terms(a, t, 2)?.map(|x| x.sum());
        sums = Some(match sums {
            None => terms,
            Some(acc) => [
                acc[0].add(terms[0])?,
                acc[1].add(terms[1])?,
                acc[2].add(terms[2])?,
            ],
        });
    }
    let count = (b * v * n_patches) as f64;
    let [c, m, var] = sums.expect("at least one patch");
    Ok(c.add(m)?.add(var)?.scale(1.0 / count))
}

/// Combined objective on the observed prefix.
///
/// `target` holds the observed steps `[B, p, V]`; `pred` covers the full
/// horizon and is truncated to `p` before every term. Total mode requires
/// `p == H`.
pub fn petsa_loss<'t>(
    pred: Var<'t>,
    target: &Tensor,
    cfg: &LossConfig,
    mode: LossMode,
) -> Result<(Var<'t>, LossReport)> {
    let [b, h, v] = time_series_shape("petsa_loss", pred)?;
    let p = match target.shape() {
        &[tb, tp, tv] if tb == b && tv == v => tp,
        other => return Err(Error::shape("petsa_loss", &[b, h, v], other)),
    };
    if p == 0 {
        return Err(Error::invalid("no observed target steps; cannot adapt"));
    }
    if p > h || (mode == LossMode::Total && p != h) {
        return Err(Error::invalid(format!(
            "{mode:?} loss over {p} observed steps with horizon {h}"
        )));
    }
    let tape = pred.tape();
    let pred = pred.narrow(1, 0, p)?;
    let target = tape.constant(target.clone());

    let hub = huber(pred, target, cfg.delta)?;
    let patch_skipped = p < cfg.patch_len;
    let patch = if patch_skipped {
        tape.constant(Tensor::scalar(0.0))
    } else {
        patch_loss(pred, target, cfg.patch_len, cfg.stride())?
    };
    let mut total = hub.add(patch)?;
    let mut freq_value = 0.0;
    if cfg.use_freq {
        let freq = freq_loss(pred, target)?;
        freq_value = freq.item();
        total = total.add(freq.scale(cfg.beta))?;
    }
    let report = LossReport {
        mode,
        total: total.item(),
        huber: hub.item(),
        freq: freq_value,
        patch: patch.item(),
        n_observed: p,
        patch_skipped,
    };
    Ok((total, report))
}
