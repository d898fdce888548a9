//! Gated low-rank residual calibration of a forecaster's input or output.
//!
//! For each variable `v`: `out[:, :, v] = z[:, :, v] + tanh(alpha[v] * z[:, :, v]) W_v + b[:, v]`
//! with `W_v = A B[:, :, v]`. `B` and `b` start at zero so a fresh module is an
//! exact identity.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"GCALSNAP";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Input,
    Output,
}

impl Side {
    fn code(self) -> u64 {
        match self {
            Side::Input => 1,
            Side::Output => 2,
        }
    }
}

const DENSE_CODE: u64 = 3;

/// `S*r + r*S*V + S*V + V`.
pub fn petsa_param_count(s: usize, v: usize, r: usize) -> usize {
    s * r + r * s * v + s * v + v
}

/// `H*H*V + H*V` for the dense per-variable output map.
pub fn dense_param_count(h: usize, v: usize) -> usize {
    h * h * v + h * v
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationModule {
    side: Side,
    len: usize,
    vars: usize,
    rank: usize,
    /// `[alpha (V), A (S x r), B (r x S x V), b (S x V)]`
    params: [Tensor; 4],
}

impl CalibrationModule {
    /// `A` is Xavier-normal with std `sqrt(2 / (S + r))` drawn from `seed`.
    pub fn init(side: Side, len: usize, vars: usize, rank: usize, alpha0: f64, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("calibration rank must be >= 1"));
        }
        if len == 0 || vars == 0 {
            return Err(Error::invalid("calibration length and variable count must be >= 1"));
        }
        if !alpha0.is_finite() {
            return Err(Error::invalid(format!("alpha0 must be finite, got {alpha0}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, (2.0 / (len + rank) as f64).sqrt()).expect("positive std");
        let a = Tensor::from_fn(&[len, rank], |_| dist.sample(&mut rng));
        Ok(CalibrationModule {
            side,
            len,
            vars,
            rank,
            params: [
                Tensor::full(&[vars], alpha0),
                a,
                Tensor::zeros(&[rank, len, vars]),
                Tensor::zeros(&[len, vars]),
            ],
        })
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn vars(&self) -> usize {
        self.vars
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> &Tensor {
        &self.params[0]
    }

    pub fn a(&self) -> &Tensor {
        &self.params[1]
    }

    pub fn b(&self) -> &Tensor {
        &self.params[2]
    }

    pub fn bias(&self) -> &Tensor {
        &self.params[3]
    }

    pub fn params(&self) -> &[Tensor; 4] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor; 4] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        petsa_param_count(self.len, self.vars, self.rank)
    }

    /// Registers the parameters as trainable leaves on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModule<'t> {
        BoundModule {
            params: self.params.clone().map(|p| tape.param(p)),
        }
    }

    /// Forward pass outside of any training graph.
    pub fn calibrate(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let m = BoundModule {
            params: self.params.clone().map(|p| tape.constant(p)),
        };
        Ok(m.apply(tape.constant(z.clone()))?.to_tensor())
    }

    pub fn to_container(&self) -> Container {
        Container {
            magic: *SNAPSHOT_MAGIC,
            version: SNAPSHOT_VERSION,
            header: vec![self.side.code(), self.len as u64, self.vars as u64, self.rank as u64],
            metadata: String::new(),
            blobs: ["alpha", "a", "b", "bias"]
                .iter()
                .zip(&self.params)
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path, SNAPSHOT_MAGIC, SNAPSHOT_VERSION)?;
        let err = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let [code, s, v, r] = c.header[..] else {
            return Err(err("not a low-rank calibration snapshot".into()));
        };
        let side = match code {
            1 => Side::Input,
            2 => Side::Output,
            _ => return Err(err(format!("side code {code} is not a low-rank module"))),
        };
        let (s, v, r) = (s as usize, v as usize, r as usize);
        let shapes = [vec![v], vec![s, r], vec![r, s, v], vec![s, v]];
        let mut params = Vec::with_capacity(4);
        for (name, shape) in ["alpha", "a", "b", "bias"].iter().zip(&shapes) {
            let t = c.blob(name).ok_or_else(|| err(format!("missing blob '{name}'")))?;
            if t.shape() != shape.as_slice() {
                return Err(err(format!("dimension mismatch for '{name}': {:?} vs {shape:?}", t.shape())));
            }
            params.push(t.clone());
        }
        Ok(CalibrationModule {
            side,
            len: s,
            vars: v,
            rank: r,
            params: params.try_into().expect("four blobs"),
        })
    }
}

/// Module parameters recorded on a tape.
#[derive(Clone, Copy)]
pub struct BoundModule<'t> {
    pub params: [Var<'t>; 4],
}

impl<'t> BoundModule<'t> {
    /// `z: [B, S, V] -> [B, S, V]`.
    pub fn apply(&self, z: Var<'t>) -> Result<Var<'t>> {
        let [alpha, a, b, bias] = self.params;
        let sh = z.shape();
        let (s, r) = (a.shape()[0], a.shape()[1]);
        let v = alpha.shape()[0];
        if sh.len() != 3 || sh[1] != s || sh[2] != v {
            return Err(Error::shape("calibrate", &sh, &[0, s, v]));
        }
        let nb = sh[0];
        let gated = z.mul(alpha)?.tanh();
        // (tanh . A) . B per variable, cheaper than forming W = A B
        let ga = gated
            .permute(&[2, 0, 1])?
            .reshape(&[v * nb, s])?
            .matmul(a)?
            .reshape(&[v, nb, r])?;
        let corr = ga.bmm(b.permute(&[2, 0, 1])?)?.permute(&[1, 2, 0])?;
        z.add(corr)?.add(bias)
    }
}

/// Dense per-variable output map `[H x H x V]` plus bias, zero-initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseCalibration {
    horizon: usize,
    vars: usize,
    /// `[W (V x H x H), b (H x V)]`
    params: [Tensor; 2],
}

impl DenseCalibration {
    pub fn init(horizon: usize, vars: usize) -> Result<Self> {
        if horizon == 0 || vars == 0 {
            return Err(Error::invalid("dense calibration needs H, V >= 1"));
        }
        Ok(DenseCalibration {
            horizon,
            vars,
            params: [Tensor::zeros(&[vars, horizon, horizon]), Tensor::zeros(&[horizon, vars])],
        })
    }

    pub fn params(&self) -> &[Tensor; 2] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor; 2] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        dense_param_count(self.horizon, self.vars)
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> [Var<'t>; 2] {
        self.params.clone().map(|p| tape.param(p))
    }

    /// `y + y_v W_v + b` for each variable `v`.
    pub fn apply<'t>(params: [Var<'t>; 2], y: Var<'t>) -> Result<Var<'t>> {
        let [w, bias] = params;
        let sh = y.shape();
        if sh.len() != 3 || [sh[1], sh[2]] != [w.shape()[1], w.shape()[0]] {
            return Err(Error::shape("dense_calibrate", &sh, &w.shape()));
        }
        let corr = y.permute(&[2, 0, 1])?.bmm(w)?.permute(&[1, 2, 0])?;
        y.add(corr)?.add(bias)
    }

    pub fn calibrate(&self, y: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.clone().map(|t| tape.constant(t));
        Ok(Self::apply(p, tape.constant(y.clone()))?.to_tensor())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Container {
            magic: *SNAPSHOT_MAGIC,
            version: SNAPSHOT_VERSION,
            header: vec![DENSE_CODE, self.horizon as u64, self.vars as u64, 0],
            metadata: String::new(),
            blobs: vec![("w".into(), self.params[0].clone()), ("bias".into(), self.params[1].clone())],
        }
        .save(path)
    }
}
