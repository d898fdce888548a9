use super::*;
use crate::data::{Dataset, Part, SplitRatios};
use crate::gradcheck::{check_gradients, SeededRng};
use nalgebra::{DMatrix, DVector};

fn random_dataset(rows: usize, vars: usize, seed: u64) -> Dataset {
    let mut rng = SeededRng::new(seed);
    let mut values = vec![0.0; rows * vars];
    // AR(1)-ish channels so lookbacks carry signal
    for c in 0..vars {
        let mut x = 0.0;
        for t in 0..rows {
            x = 0.8 * x + rng.uniform(-1.0, 1.0) + 0.5 * ((t as f64) * 0.3 + c as f64).sin();
            values[t * vars + c] = x;
        }
    }
    let cols = (0..vars).map(|c| format!("v{c}")).collect();
    Dataset::from_values("rand", cols, values).unwrap()
}

fn split(ds: Dataset) -> Dataset {
    ds.split_and_normalize(SplitRatios::DEFAULT).unwrap()
}

/// Normal equations on the un-centered design `[1 | X]` with the intercept left unpenalized.
fn oracle_ols(w: &Windows<'_>, c: usize, lambda: f64) -> (DMatrix<f64>, DVector<f64>) {
    let (l, h, v, n) = (w.seq_len(), w.horizon(), w.vars(), w.len());
    let x = DMatrix::from_fn(n, l + 1, |i, j| if j == 0 { 1.0 } else { w.lookback(i)[(j - 1) * v + c] });
    let y = DMatrix::from_fn(n, h, |i, j| w.target(i)[j * v + c]);
    let mut g = x.transpose() * &x;
    for j in 1..=l {
        g[(j, j)] += lambda;
    }
    let sol = g.lu().solve(&(x.transpose() * y)).unwrap();
    (sol.rows(1, l).into_owned(), sol.row(0).transpose())
}

#[test]
fn ols_matches_normal_equation_oracle() {
    let ds = split(random_dataset(300, 3, 1));
    let w = ds.windows(Part::Train, 12, 5, 1).unwrap();
    let f = fit_ols(&w, 0.5).unwrap();
    let (weight, bias) = (f.param("weight").unwrap(), f.param("bias").unwrap());
    for c in 0..3 {
        let (ow, ob) = oracle_ols(&w, c, 0.5);
        for a in 0..12 {
            for j in 0..5 {
                assert!((weight.data()[(c * 12 + a) * 5 + j] - ow[(a, j)]).abs() < 1e-8);
            }
        }
        for j in 0..5 {
            assert!((bias.data()[c * 5 + j] - ob[j]).abs() < 1e-8);
        }
    }
}

#[test]
fn ols_recovers_realizable_map() {
    // y_t = 2 cos(w) y_{t-1} - y_{t-2} + const holds exactly for a shifted sinusoid
    let values: Vec<f64> = (0..300).map(|t| 1.5 * (0.37 * t as f64 + 0.2).sin() + 0.8).collect();
    let ds = split(Dataset::from_values("sine", vec!["a".into()], values).unwrap());
    let train = ds.windows(Part::Train, 2, 1, 1).unwrap();
    let f = fit_ols(&train, 0.0).unwrap();
    assert!(evaluate_mse(&f, &train).unwrap() < 1e-10);
    let w = f.param("weight").unwrap().data();
    assert!((w[1] - 2.0 * 0.37f64.cos()).abs() < 1e-6);
    assert!((w[0] + 1.0).abs() < 1e-6);
}

#[test]
fn ols_singular_without_ridge_is_an_error() {
    let ds = split(random_dataset(60, 1, 2));
    // 42 train rows, L=30 leaves only 3 windows, far fewer than 30 unknowns
    let w = ds.windows(Part::Train, 30, 10, 1).unwrap();
    assert!(w.len() < 30);
    let err = fit_ols(&w, 0.0).unwrap_err().to_string();
    assert!(err.contains("lambda > 0"), "{err}");
    assert!(fit_ols(&w, 1e-3).is_ok());
}

#[test]
fn ols_huge_ridge_predicts_the_intercept() {
    let ds = split(random_dataset(300, 2, 4));
    let w = ds.windows(Part::Train, 10, 4, 1).unwrap();
    let f = fit_ols(&w, 1e14).unwrap();
    assert!(f.param("weight").unwrap().data().iter().all(|x| x.abs() < 1e-8));
    let p = f.predict(&Tensor::zeros(&[1, 10, 2])).unwrap();
    let bias = f.param("bias").unwrap();
    for t in 0..4 {
        for c in 0..2 {
            assert_eq!(p.data()[t * 2 + c], bias.data()[c * 4 + t]);
        }
    }
    // intercept approaches the target mean
    let (_, y) = w.batch(&(0..w.len()).collect::<Vec<_>>());
    let mean0 = y.data().iter().step_by(2).sum::<f64>() / (y.len() / 2) as f64;
    let b0 = bias.data()[..4].iter().sum::<f64>() / 4.0;
    assert!((mean0 - b0).abs() < 1e-6);
}

#[test]
fn decomposition_identities() {
    let (trend, rem) = decompose(&[2.5; 10], 5).unwrap();
    assert!(trend.iter().all(|&t| (t - 2.5).abs() < 1e-15));
    assert!(rem.iter().all(|&r| r.abs() < 1e-15));
    let mut rng = SeededRng::new(9);
    let x: Vec<f64> = (0..30).map(|_| rng.uniform(-3.0, 3.0)).collect();
    let (trend, rem) = decompose(&x, 25).unwrap();
    for i in 0..30 {
        assert_eq!(trend[i] + rem[i], trend[i] + (x[i] - trend[i]));
        assert!((trend[i] + rem[i] - x[i]).abs() < 1e-15);
    }
    let k = moving_average_matrix(30, 25).unwrap();
    for s in 0..30 {
        assert!((k[s * 30..(s + 1) * 30].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(moving_average_matrix(10, 20).is_err());
    assert!(moving_average_matrix(10, 21).is_err());
    assert!(moving_average_matrix(10, 19).is_ok());
    assert!(moving_average_matrix(10, 4).is_err());
}

#[test]
fn dlinear_effective_map_matches_two_branch_definition() {
    let ds = split(random_dataset(200, 2, 6));
    let w = ds.windows(Part::Train, 16, 6, 1).unwrap();
    let cfg = TrainConfig {
        kernel: 5,
        epochs: 1,
        ..TrainConfig::default()
    };
    let f = fit_dlinear(&w, &cfg).unwrap();
    let pair = w.pair(3);
    let p = f.predict(&pair.x.clone().reshape(&[1, 16, 2]).unwrap()).unwrap();
    let ws = f.param("seasonal_weight").unwrap();
    let wt = f.param("trend_weight").unwrap();
    let bs = f.param("seasonal_bias").unwrap();
    let bt = f.param("trend_bias").unwrap();
    for c in 0..2 {
        let x: Vec<f64> = (0..16).map(|t| pair.x.data()[t * 2 + c]).collect();
        let (trend, rem) = decompose(&x, 5).unwrap();
        for j in 0..6 {
            let mut o = bs.data()[c * 6 + j] + bt.data()[c * 6 + j];
            for s in 0..16 {
                o += rem[s] * ws.data()[(c * 16 + s) * 6 + j] + trend[s] * wt.data()[(c * 16 + s) * 6 + j];
            }
            assert!((o - p.data()[j * 2 + c]).abs() < 1e-12);
        }
    }
}

#[test]
fn dlinear_close_to_ols_on_trend_series() {
    // noisy linear trend; a noise-free trend is exactly realizable by OLS and makes ratios meaningless
    let rows = 1200;
    let mut rng = SeededRng::new(13);
    let values: Vec<f64> = (0..rows).map(|t| 0.002 * t as f64 + 0.3 * rng.uniform(-1.0, 1.0)).collect();
    let ds = split(Dataset::from_values("trend", vec!["a".into()], values).unwrap());
    let train = ds.windows(Part::Train, 48, 12, 1).unwrap();
    let val = ds.windows(Part::Val, 48, 12, 1).unwrap();
    let ols = fit_ols(&train, 1e-3).unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        lr: 1e-3,
        batch_size: 128,
        ..TrainConfig::default()
    };
    let dl = fit_dlinear(&train, &cfg).unwrap();
    let (m_ols, m_dl) = (evaluate_mse(&ols, &val).unwrap(), evaluate_mse(&dl, &val).unwrap());
    assert!(m_dl <= m_ols * 1.05, "dlinear {m_dl} vs ols {m_ols}");
}

fn small_mlp(epochs: usize, seed: u64) -> (Dataset, Forecaster) {
    let ds = split(random_dataset(160, 2, 7));
    let w = ds.windows(Part::Train, 8, 4, 1).unwrap();
    let cfg = TrainConfig {
        hidden: 6,
        epochs,
        lr: 1e-2,
        seed,
        ..TrainConfig::default()
    };
    let f = fit_mlp(&w, &cfg).unwrap();
    (ds, f)
}

#[test]
fn mlp_zero_epochs_and_determinism() {
    let (ds, f0) = small_mlp(0, 1);
    let x = ds.windows(Part::Test, 8, 4, 1).unwrap().batch(&[0, 1]).0;
    assert!(f0.predict(&x).unwrap().all_finite());
    let (_, a) = small_mlp(2, 11);
    let (_, b) = small_mlp(2, 11);
    assert_eq!(a.checksum(), b.checksum());
    let (_, c) = small_mlp(2, 12);
    assert_ne!(a.checksum(), c.checksum());
}

#[test]
fn every_backbone_is_differentiable_in_its_input() {
    let ds = split(random_dataset(200, 2, 8));
    let w = ds.windows(Part::Train, 8, 4, 1).unwrap();
    let cfg = TrainConfig {
        kernel: 3,
        hidden: 5,
        epochs: 1,
        ..TrainConfig::default()
    };
    let mut rng = SeededRng::new(10);
    for kind in ForecasterKind::ALL {
        let f = fit(kind, &w, &cfg).unwrap();
        let x = rng.tensor(&[2, 8, 2]);
        let probe = rng.tensor(&[2, 4, 2]);
        check_gradients(&[x], 1e-6, |tape, v| {
            let y = f.forward(v[0])?;
            y.mul(tape.constant(probe.clone()))?.tanh().sum().pipe(Ok)
        });
    }
}

trait Pipe: Sized {
    fn pipe<T>(self, f: impl FnOnce(Self) -> T) -> T {
        f(self)
    }
}
impl<T> Pipe for T {}

#[test]
fn batch_predict_equals_per_sample_loop_and_channels_are_independent() {
    let ds = split(random_dataset(200, 3, 9));
    let w = ds.windows(Part::Train, 10, 5, 1).unwrap();
    let cfg = TrainConfig {
        kernel: 5,
        hidden: 4,
        epochs: 1,
        ..TrainConfig::default()
    };
    for kind in ForecasterKind::ALL {
        let f = fit(kind, &w, &cfg).unwrap();
        let idx = [0, 5, 9, 5];
        let (x, _) = w.batch(&idx);
        let p = f.predict(&x).unwrap();
        for (b, &i) in idx.iter().enumerate() {
            let single = f.predict(&w.batch(&[i]).0).unwrap();
            let row = &p.data()[b * 15..(b + 1) * 15];
            assert!(row.iter().zip(single.data()).all(|(a, s)| (a - s).abs() < 1e-12));
        }
        assert_eq!(&p.data()[15..30], &p.data()[45..60]);

        let mut bumped = x.clone();
        for t in 0..10 {
            bumped.data_mut()[t * 3 + 1] += 0.5;
        }
        let q = f.predict(&bumped).unwrap();
        for t in 0..5 {
            assert_eq!(p.data()[t * 3], q.data()[t * 3], "{kind}");
            assert_eq!(p.data()[t * 3 + 2], q.data()[t * 3 + 2], "{kind}");
            assert_ne!(p.data()[t * 3 + 1], q.data()[t * 3 + 1], "{kind}");
        }
    }
}

#[test]
fn predict_rejects_wrong_shapes() {
    let (_, f) = small_mlp(0, 0);
    assert!(f.predict(&Tensor::zeros(&[1, 7, 2])).is_err());
    assert!(f.predict(&Tensor::zeros(&[1, 8, 3])).is_err());
    assert!(f.predict(&Tensor::zeros(&[8, 2])).is_err());
}

#[test]
fn checkpoint_round_trip_and_integrity() {
    let dir = tempfile::tempdir().unwrap();
    let ds = split(random_dataset(200, 2, 12));
    let w = ds.windows(Part::Train, 8, 4, 1).unwrap();
    let cfg = TrainConfig {
        kernel: 5,
        hidden: 4,
        epochs: 1,
        ..TrainConfig::default()
    };
    let x = w.batch(&[0, 1, 2]).0;
    for kind in ForecasterKind::ALL {
        let f = fit(kind, &w, &cfg).unwrap();
        let path = checkpoint_path(dir.path(), "rand", kind, 8, 4);
        f.save_checkpoint(&path).unwrap();
        let g = Forecaster::load_checkpoint(&path).unwrap();
        assert_eq!(f, g);
        assert_eq!(f.predict(&x).unwrap(), g.predict(&x).unwrap());
        assert!(g.provenance().contains("dataset=rand"));

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 40]).unwrap();
        assert!(matches!(Forecaster::load_checkpoint(&path), Err(Error::Checkpoint { .. })));
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x10;
        std::fs::write(&path, &bad).unwrap();
        let msg = Forecaster::load_checkpoint(&path).unwrap_err().to_string();
        assert!(msg.contains("checksum"), "{msg}");
    }
    let f = fit(ForecasterKind::Ols, &w, &cfg).unwrap();
    assert!(f.expect_dims(8, 4, 2).is_ok());
    assert!(f.expect_dims(8, 5, 2).is_err());
}
