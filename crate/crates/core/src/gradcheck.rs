//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it stays independent
//! of the backward rules it is used to verify.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Deterministic random tensors for tests and oracles.
pub struct SeededRng(ChaCha8Rng);

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.0.random_range(lo..hi)
    }

    pub fn usize(&mut self, lo: usize, hi_inclusive: usize) -> usize {
        self.0.random_range(lo..=hi_inclusive)
    }

    /// Uniform entries in [-1, 1).
    pub fn tensor(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| self.0.random_range(-1.0..1.0))
    }
}

/// Relative error `|a - n|_2 / max(|a|_2, |n|_2, 1e-10)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-10)
}

/// Central differences of the scalar `f` with respect to every input.
pub fn numeric_gradients<F>(inputs: &[Tensor], f: &F) -> Result<Vec<Vec<f64>>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };
    let mut out = Vec::with_capacity(inputs.len());
    let mut xs = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + STEP;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = orig - STEP;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            g[j] = (up - down) / (2.0 * STEP);
        }
        out.push(g);
    }
    Ok(out)
}

/// Analytic gradients of `f` with every input registered as a trainable leaf.
pub fn analytic_gradients<F>(inputs: &[Tensor], f: &F) -> Result<Vec<Vec<f64>>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let root = f(&tape, &vars)?;
    let grads = tape.backward(root)?;
    Ok(vars
        .iter()
        .map(|&v| grads.get_or_zeros(v).into_data())
        .collect())
}

/// Worst relative error across inputs between analytic and numeric gradients.
pub fn gradient_error<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let a = analytic_gradients(inputs, &f)?;
    let n = numeric_gradients(inputs, &f)?;
    Ok(a.iter()
        .zip(&n)
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

/// Panics when [`gradient_error`] exceeds `tol`.
pub fn check_gradients<F>(inputs: &[Tensor], tol: f64, f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let err = gradient_error(inputs, f).expect("gradient evaluation failed");
    assert!(err < tol, "gradient relative error {err:e} exceeds {tol:e}");
}
