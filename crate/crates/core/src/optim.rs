//! First-order optimizers over lists of [`Tensor`] parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::invalid(format!("unknown optimizer '{other}'"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

/// Optimizer with its per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    /// `lr` may be zero (a no-op run); negative or non-finite rates are rejected.
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        Ok(Optimizer {
            kind,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters and gradients are matched by position.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer_step", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::Numerical("non-finite gradient".into()));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (x, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= self.lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - ADAM_BETA1.powi(t);
                let bc2 = 1.0 - ADAM_BETA2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (j, (x, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * d;
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * d * d;
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        *x -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(x: f64) -> Tensor {
        Tensor::full(&[1], x)
    }

    #[test]
    fn sgd_step() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1).unwrap();
        let mut p = one(1.0);
        opt.step(&mut [&mut p], &[one(1.0)]).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let lr = 1e-3;
        let mut opt = Optimizer::new(OptimizerKind::Adam, lr).unwrap();
        let mut p = one(1.0);
        opt.step(&mut [&mut p], &[one(1.0)]).unwrap();
        // m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
        let expected = 1.0 - lr / (1.0 + ADAM_EPS);
        assert!((p.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut opt = Optimizer::new(kind, 0.5).unwrap();
            let mut p = Tensor::new(&[3], vec![0.3, -2.0, 7.5]).unwrap();
            let before = p.clone();
            for _ in 0..3 {
                opt.step(&mut [&mut p], &[Tensor::zeros(&[3])]).unwrap();
            }
            assert_eq!(p, before);
        }
    }

    #[test]
    fn rejects_non_finite_gradients_and_bad_rates() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1).unwrap();
        let mut p = one(0.0);
        assert!(opt.step(&mut [&mut p], &[one(f64::NAN)]).is_err());
        assert!(Optimizer::new(OptimizerKind::Sgd, -1.0).is_err());
        assert!(Optimizer::new(OptimizerKind::Sgd, f64::NAN).is_err());
    }
}
