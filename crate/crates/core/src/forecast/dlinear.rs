use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ChannelMap, Tape};
use crate::data::Windows;
use crate::error::{Error, Result};
use crate::losses::mse;
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::Tensor;

use super::{provenance_of, Forecaster, ForecasterKind, TrainConfig};

/// `K[s, t]`: weight of input step `t` in the trend at step `s` for a centered
/// moving average of width `kernel` with edge-replicated padding.
pub fn moving_average_matrix(len: usize, kernel: usize) -> Result<Vec<f64>> {
    check_kernel(len, kernel)?;
    let half = (kernel - 1) / 2;
    let mut k = vec![0.0; len * len];
    for s in 0..len {
        for off in 0..kernel {
            let p = (s + off) as isize - half as isize;
            let t = p.clamp(0, len as isize - 1) as usize;
            k[s * len + t] += 1.0 / kernel as f64;
        }
    }
    Ok(k)
}

/// Splits a series into `(trend, remainder)` with `trend + remainder == x`.
pub fn decompose(x: &[f64], kernel: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x.len();
    let k = moving_average_matrix(n, kernel)?;
    let trend: Vec<f64> = (0..n)
        .map(|s| (0..n).map(|t| k[s * n + t] * x[t]).sum())
        .collect();
    let rem = x.iter().zip(&trend).map(|(a, b)| a - b).collect();
    Ok((trend, rem))
}

fn check_kernel(len: usize, kernel: usize) -> Result<()> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::invalid(format!("moving-average kernel must be odd, got {kernel}")));
    }
    if kernel >= 2 * len {
        return Err(Error::invalid(format!(
            "moving-average kernel {kernel} must be smaller than twice the lookback {len}"
        )));
    }
    Ok(())
}

pub(super) fn channel_map(f: &Forecaster) -> Result<ChannelMap> {
    let (l, h, v) = (f.seq_len, f.horizon, f.vars);
    let ws = f.param("seasonal_weight")?;
    let wt = f.param("trend_weight")?;
    let bs = f.param("seasonal_bias")?;
    let bt = f.param("trend_bias")?;
    for w in [ws, wt] {
        if w.shape() != [v, l, h] {
            return Err(Error::shape("dlinear_params", w.shape(), &[v, l, h]));
        }
    }
    for b in [bs, bt] {
        if b.shape() != [v, h] {
            return Err(Error::shape("dlinear_params", b.shape(), &[v, h]));
        }
    }
    let k = moving_average_matrix(l, f.kernel)?;
    // out = x Ws + (K x)(Wt - Ws), so the effective map is Ws + K^T (Wt - Ws).
    let mut weights = ws.data().to_vec();
    for c in 0..v {
        let base = c * l * h;
        for s in 0..l {
            for t in 0..l {
                let kst = k[s * l + t];
                if kst == 0.0 {
                    continue;
                }
                for j in 0..h {
                    let d = wt.data()[base + s * h + j] - ws.data()[base + s * h + j];
                    weights[base + t * h + j] += kst * d;
                }
            }
        }
    }
    let bias = bs.data().iter().zip(bt.data()).map(|(a, b)| a + b).collect();
    Ok(ChannelMap {
        in_len: l,
        out_len: h,
        groups: v,
        weights,
        bias,
    })
}

/// Trend/remainder decomposition followed by two per-channel linear maps,
/// trained with Adam on minibatch MSE.
pub fn fit_dlinear(train: &Windows<'_>, cfg: &TrainConfig) -> Result<Forecaster> {
    let (l, h, v, n) = (train.seq_len(), train.horizon(), train.vars(), train.len());
    let kmat = moving_average_matrix(l, cfg.kernel)?;
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    let mut ws = Tensor::full(&[v, l, h], 1.0 / l as f64);
    let mut wt = ws.clone();
    let mut bs = Tensor::zeros(&[v, 1, h]);
    let mut bt = Tensor::zeros(&[v, 1, h]);
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut trend = vec![0.0; v * b * l];
            let mut seas = vec![0.0; v * b * l];
            let mut target = vec![0.0; v * b * h];
            for (bi, &i) in chunk.iter().enumerate() {
                let x = train.lookback(i);
                let y = train.target(i);
                for c in 0..v {
                    let row = (c * b + bi) * l;
                    for s in 0..l {
                        let tr: f64 = (0..l).map(|t| kmat[s * l + t] * x[t * v + c]).sum();
                        trend[row + s] = tr;
                        seas[row + s] = x[s * v + c] - tr;
                    }
                    for t in 0..h {
                        target[(c * b + bi) * h + t] = y[t * v + c];
                    }
                }
            }
            let tape = Tape::new();
            let seas = tape.constant(Tensor::new(&[v, b, l], seas)?);
            let trend = tape.constant(Tensor::new(&[v, b, l], trend)?);
            let target = tape.constant(Tensor::new(&[v, b, h], target)?);
            let pws = tape.param(ws.clone());
            let pwt = tape.param(wt.clone());
            let pbs = tape.param(bs.clone());
            let pbt = tape.param(bt.clone());
            let out = seas
                .bmm(pws)?
                .add(trend.bmm(pwt)?)?
                .add(pbs)?
                .add(pbt)?;
            let loss = mse(out, target)?;
            if !loss.item().is_finite() {
                return Err(Error::Numerical(format!(
                    "DLinear training diverged in epoch {epoch}; try a smaller learning rate than {}",
                    cfg.lr
                )));
            }
            let g = tape.backward(loss)?;
            let grads = [pws, pwt, pbs, pbt].map(|p| g.get_or_zeros(p));
            opt.step(&mut [&mut ws, &mut wt, &mut bs, &mut bt], &grads)?;
        }
    }
    Forecaster::from_params(
        ForecasterKind::Dlinear,
        (l, h, v),
        cfg.kernel,
        provenance_of(train),
        vec![
            ("seasonal_weight".into(), ws),
            ("seasonal_bias".into(), bs.reshape(&[v, h])?),
            ("trend_weight".into(), wt),
            ("trend_bias".into(), bt.reshape(&[v, h])?),
        ],
    )
}
