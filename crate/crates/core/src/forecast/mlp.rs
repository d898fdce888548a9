use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::data::Windows;
use crate::error::{Error, Result};
use crate::losses::mse;
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::Tensor;

use super::{provenance_of, Forecaster, ForecasterKind, TrainConfig};

pub(super) fn check_shapes(f: &Forecaster) -> Result<()> {
    let w1 = f.param("w1")?;
    let hid = w1.shape().get(1).copied().unwrap_or(0);
    let expected: [(&str, Vec<usize>); 4] = [
        ("w1", vec![f.seq_len, hid]),
        ("b1", vec![hid]),
        ("w2", vec![hid, f.horizon]),
        ("b2", vec![f.horizon]),
    ];
    for (name, shape) in expected {
        let t = f.param(name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::shape("mlp_params", t.shape(), &shape));
        }
    }
    Ok(())
}

/// Shared two-layer network applied to every channel's time series.
fn net<'t>(x: Var<'t>, w1: Var<'t>, b1: Var<'t>, w2: Var<'t>, b2: Var<'t>) -> Result<Var<'t>> {
    let sh = x.shape();
    let (b, l, v) = (sh[0], sh[1], sh[2]);
    let h = w2.shape()[1];
    let rows = x.permute(&[0, 2, 1])?.reshape(&[b * v, l])?;
    let hidden = rows.matmul(w1)?.add(b1)?.tanh();
    hidden
        .matmul(w2)?
        .add(b2)?
        .reshape(&[b, v, h])?
        .permute(&[0, 2, 1])
}

pub(super) fn forward<'t>(f: &Forecaster, x: Var<'t>) -> Result<Var<'t>> {
    let tape = x.tape();
    let [w1, b1, w2, b2] = ["w1", "b1", "w2", "b2"].map(|n| f.param(n).map(|t| tape.constant(t.clone())));
    net(x, w1?, b1?, w2?, b2?)
}

/// Xavier-normal weights and zero biases, then Adam on minibatch MSE.
/// Deterministic for a given seed.
pub fn fit_mlp(train: &Windows<'_>, cfg: &TrainConfig) -> Result<Forecaster> {
    let (l, h, v, n) = (train.seq_len(), train.horizon(), train.vars(), train.len());
    let hid = cfg.hidden;
    if hid == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("hidden width and batch_size must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut xavier = |fan_in: usize, fan_out: usize| {
        let dist = Normal::new(0.0, (2.0 / (fan_in + fan_out) as f64).sqrt()).expect("positive std");
        Tensor::from_fn(&[fan_in, fan_out], |_| dist.sample(&mut rng))
    };
    let mut w1 = xavier(l, hid);
    let mut w2 = xavier(hid, h);
    let mut b1 = Tensor::zeros(&[hid]);
    let mut b2 = Tensor::zeros(&[h]);
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.lr)?;
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk);
            let tape = Tape::new();
            let [pw1, pb1, pw2, pb2] = [&w1, &b1, &w2, &b2].map(|t| tape.param(t.clone()));
            let pred = net(tape.constant(x), pw1, pb1, pw2, pb2)?;
            let loss = mse(pred, tape.constant(y))?;
            if !loss.item().is_finite() {
                return Err(Error::Numerical(format!(
                    "MLP training diverged in epoch {epoch}; try a smaller learning rate than {}",
                    cfg.lr
                )));
            }
            let g = tape.backward(loss)?;
            let grads = [pw1, pb1, pw2, pb2].map(|p| g.get_or_zeros(p));
            opt.step(&mut [&mut w1, &mut b1, &mut w2, &mut b2], &grads)?;
        }
    }
    Forecaster::from_params(
        ForecasterKind::Mlp,
        (l, h, v),
        0,
        provenance_of(train),
        vec![
            ("w1".into(), w1),
            ("b1".into(), b1),
            ("w2".into(), w2),
            ("b2".into(), b2),
        ],
    )
}
