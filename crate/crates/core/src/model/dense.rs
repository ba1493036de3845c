use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{matmul_nt_into, Tensor};

/// Fully connected layer. `weight` is `out × in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl Dense {
    /// Weights from `N(0, 1/fan_in)`, zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
        let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        Self { weight: Tensor::matrix(fan_out, fan_in, data).expect("positive dims"), bias: vec![0.0; fan_out] }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn num_params(&self) -> usize {
        self.weight.numel() + self.bias.len()
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x * (1.0 / (1.0 + (-x).exp()))
}

/// `h · wᵀ + b` for a row-major batch, with the same arithmetic as the
/// recorded path.
pub(crate) fn affine(h: &[f64], rows: usize, weight: &Tensor, bias: &[f64]) -> Vec<f64> {
    let (out, inp) = (weight.rows(), weight.cols());
    let mut y = vec![0.0; rows * out];
    matmul_nt_into(h, weight.data(), &mut y, rows, inp, out);
    for chunk in y.chunks_mut(out) {
        chunk.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
    y
}
