//! Dense layers stored as plain tensors and bound onto a tape per forward.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// `y = x W + b` with `W: in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    /// Gaussian weights with standard deviation `gain / √in`, zero bias.
    pub fn random<R: Rng + ?Sized>(inp: usize, out: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            w: Tensor::randn(&[inp, out], gain / (inp as f64).sqrt(), rng),
            b: Tensor::zeros(&[out]),
        }
    }

    pub fn zeros(inp: usize, out: usize) -> Self {
        Self {
            w: Tensor::zeros(&[inp, out]),
            b: Tensor::zeros(&[out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn num_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// Puts the weights on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundLinear {
        let (w, b) = if trainable {
            (tape.param(self.w.clone()), tape.param(self.b.clone()))
        } else {
            (tape.constant(self.w.clone()), tape.constant(self.b.clone()))
        };
        BoundLinear { w, b }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.w)?;
        tape.add_trailing(y, self.b)
    }
}
