use crate::autograd::ChannelMap;
use crate::data::Windows;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{provenance_of, Forecaster, ForecasterKind};

/// Relative pivot size below which the regularized Gram matrix counts as singular.
const PIVOT_TOL: f64 = 1e-12;

pub(super) fn channel_map(f: &Forecaster) -> Result<ChannelMap> {
    let (l, h, v) = (f.seq_len, f.horizon, f.vars);
    let w = f.param("weight")?;
    let b = f.param("bias")?;
    if w.shape() != [v, l, h] || b.shape() != [v, h] {
        return Err(Error::shape("ols_params", w.shape(), b.shape()));
    }
    Ok(ChannelMap {
        in_len: l,
        out_len: h,
        groups: v,
        weights: w.data().to_vec(),
        bias: b.data().to_vec(),
    })
}

/// Per-channel ridge regression from lookback to horizon with an unpenalized intercept.
pub fn fit_ols(train: &Windows<'_>, ridge_lambda: f64) -> Result<Forecaster> {
    if !(ridge_lambda >= 0.0) || !ridge_lambda.is_finite() {
        return Err(Error::invalid(format!("ridge lambda must be >= 0, got {ridge_lambda}")));
    }
    let (l, h, v, n) = (train.seq_len(), train.horizon(), train.vars(), train.len());
    if n == 0 {
        return Err(Error::invalid("no training windows"));
    }
    let mut weight = vec![0.0; v * l * h];
    let mut bias = vec![0.0; v * h];
    let mut xs = vec![0.0; n * l];
    let mut ys = vec![0.0; n * h];
    for c in 0..v {
        for i in 0..n {
            for (t, row) in train.lookback(i).chunks_exact(v).enumerate() {
                xs[i * l + t] = row[c];
            }
            for (t, row) in train.target(i).chunks_exact(v).enumerate() {
                ys[i * h + t] = row[c];
            }
        }
        let w = &mut weight[c * l * h..(c + 1) * l * h];
        let icpt = &mut bias[c * h..(c + 1) * h];
        solve_ridge(&mut xs, &mut ys, n, l, h, ridge_lambda, w, icpt)?;
    }
    Forecaster::from_params(
        ForecasterKind::Ols,
        (l, h, v),
        0,
        provenance_of(train),
        vec![
            ("weight".into(), Tensor::new(&[v, l, h], weight)?),
            ("bias".into(), Tensor::new(&[v, h], bias)?),
        ],
    )
}

/// Solves `min |Xc W - Yc|^2 + lambda |W|^2` on centered data and recovers the
/// intercept from the means. `xs` and `ys` are centered in place.
#[allow(clippy::too_many_arguments)]
fn solve_ridge(
    xs: &mut [f64],
    ys: &mut [f64],
    n: usize,
    l: usize,
    h: usize,
    lambda: f64,
    w: &mut [f64],
    icpt: &mut [f64],
) -> Result<()> {
    let xm = column_means(xs, n, l);
    let ym = column_means(ys, n, h);
    for i in 0..n {
        for j in 0..l {
            xs[i * l + j] -= xm[j];
        }
        for j in 0..h {
            ys[i * h + j] -= ym[j];
        }
    }
    let mut g = vec![0.0; l * l];
    let mut rhs = vec![0.0; l * h];
    for i in 0..n {
        let x = &xs[i * l..(i + 1) * l];
        let y = &ys[i * h..(i + 1) * h];
        for a in 0..l {
            let xa = x[a];
            for b in a..l {
                g[a * l + b] += xa * x[b];
            }
            let r = &mut rhs[a * h..(a + 1) * h];
            for (rj, yj) in r.iter_mut().zip(y) {
                *rj += xa * yj;
            }
        }
    }
    for a in 0..l {
        for b in 0..a {
            g[a * l + b] = g[b * l + a];
        }
        g[a * l + a] += lambda;
    }
    cholesky_in_place(&mut g, l).map_err(|pivot| {
        Error::Numerical(format!(
            "normal equations are singular at pivot {pivot} with ridge lambda {lambda}; use lambda > 0"
        ))
    })?;
    cholesky_solve(&g, l, &mut rhs, h);
    w.copy_from_slice(&rhs);
    for j in 0..h {
        icpt[j] = ym[j] - (0..l).map(|a| xm[a] * w[a * h + j]).sum::<f64>();
    }
    Ok(())
}

fn column_means(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut mean = vec![0.0; cols];
    for r in m.chunks_exact(cols) {
        for (a, x) in mean.iter_mut().zip(r) {
            *a += x;
        }
    }
    mean.iter_mut().for_each(|a| *a /= rows as f64);
    mean
}

/// Lower Cholesky factor written over the lower triangle; `Err(pivot)` when not positive definite.
fn cholesky_in_place(a: &mut [f64], n: usize) -> std::result::Result<(), usize> {
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > PIVOT_TOL * scale) {
            return Err(j);
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    Ok(())
}

/// Solves `L L^T X = B` for `B` of shape `[n, m]`, in place.
fn cholesky_solve(lower: &[f64], n: usize, b: &mut [f64], m: usize) {
    for i in 0..n {
        for k in 0..i {
            let f = lower[i * n + k];
            for j in 0..m {
                b[i * m + j] -= f * b[k * m + j];
            }
        }
        let d = lower[i * n + i];
        b[i * m..(i + 1) * m].iter_mut().for_each(|x| *x /= d);
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            let f = lower[k * n + i];
            for j in 0..m {
                b[i * m + j] -= f * b[k * m + j];
            }
        }
        let d = lower[i * n + i];
        b[i * m..(i + 1) * m].iter_mut().for_each(|x| *x /= d);
    }
}
