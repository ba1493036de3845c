use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelError, Result};
use crate::funlora::{conv_modulate, conv_modulate_on_tape, Adapter, AdapterVars, Combine};
use crate::tensor::{Tape, Tensor, Var};

/// Square-kernel 2-D convolution (stride 1, zero "same" padding) whose
/// kernels are modulated per class by an adapter of shape `C_out × C_in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyConvLayer {
    /// `C_out × C_in × s × s`
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl TinyConvLayer {
    pub fn init<R: Rng + ?Sized>(c_in: usize, c_out: usize, size: usize, rng: &mut R) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(ModelError::Invalid("kernel size must be odd".into()));
        }
        let normal = Normal::new(0.0, 1.0 / ((c_in * size * size) as f64).sqrt()).expect("positive std");
        let data = (0..c_out * c_in * size * size).map(|_| normal.sample(rng)).collect();
        Ok(Self { weight: Tensor::new(vec![c_out, c_in, size, size], data)?, bias: vec![0.0; c_out] })
    }

    pub fn channels(&self) -> (usize, usize) {
        (self.weight.shape()[0], self.weight.shape()[1])
    }

    /// Kernel after applying an adapter; the update acts as a
    /// `C_out × C_in × 1 × 1` tensor broadcast over each kernel.
    pub fn effective_kernel(&self, adapter: &Adapter) -> Result<Tensor> {
        let f = adapter.matrix()?;
        let (o, i) = self.channels();
        if f.shape() != [o, i] {
            return Err(ModelError::Invalid(format!("adapter {:?} does not match {o}x{i} channels", f.shape())));
        }
        Ok(match adapter.combine {
            Combine::Mul => conv_modulate(&self.weight, &f)?,
            Combine::MulAdd => conv_modulate(&self.weight, &f.map(|x| 1.0 + x))?,
            Combine::Add => {
                let block = self.weight.shape()[2] * self.weight.shape()[3];
                let mut data = self.weight.data().to_vec();
                for (chunk, &s) in data.chunks_mut(block).zip(f.data()) {
                    chunk.iter_mut().for_each(|x| *x += s);
                }
                Tensor::new(self.weight.shape().to_vec(), data)?
            }
        })
    }

    /// Recorded multiplicative modulation, so gradients reach the adapter.
    pub fn modulated_kernel_on_tape(&self, tape: &mut Tape, adapter: &Adapter, vars: &AdapterVars) -> Result<Var> {
        if adapter.combine != Combine::Mul {
            return Err(ModelError::Invalid(
                "recorded convolution modulation supports the multiplicative combine".into(),
            ));
        }
        let f = adapter.functional_on_tape(tape, vars)?;
        let w = tape.constant(self.weight.clone());
        Ok(conv_modulate_on_tape(tape, w, f)?)
    }

    /// Convolves `input: C_in × H × W` with `kernel` (defaults to the base
    /// weight).
    pub fn forward(&self, input: &Tensor, kernel: Option<&Tensor>) -> Result<Tensor> {
        let k = kernel.unwrap_or(&self.weight);
        let (co, ci) = self.channels();
        let s = k.shape()[2];
        if input.rank() != 3 || input.shape()[0] != ci || k.shape() != self.weight.shape() {
            return Err(ModelError::Invalid(format!("input {:?} does not fit kernel {:?}", input.shape(), k.shape())));
        }
        let (h, w) = (input.shape()[1], input.shape()[2]);
        let pad = (s / 2) as isize;
        let mut out = vec![0.0; co * h * w];
        for o in 0..co {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = self.bias[o];
                    for c in 0..ci {
                        for ky in 0..s {
                            let iy = y as isize + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..s {
                                let ix = x as isize + kx as isize - pad;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let kv = k.data()[((o * ci + c) * s + ky) * s + kx];
                                acc += kv * input.data()[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(o * h + y) * w + x] = acc;
                }
            }
        }
        Ok(Tensor::new(vec![co, h, w], out)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funlora::{init_adapter, AdapterSpec, FunctionalKind};
    use crate::rng::{rng_for, Stream};

    #[test]
    fn calibrated_adapter_leaves_convolution_unchanged() {
        let mut rng = rng_for(3, Stream::Init, 0);
        let layer = TinyConvLayer::init(2, 3, 3, &mut rng).unwrap();
        let spec = AdapterSpec {
            kind: FunctionalKind::Cos { p: 4, trainable: false },
            combine: Combine::Mul,
            calibrate: true,
        };
        let ad = init_adapter(&spec, 3, 2, 0, &mut rng).unwrap().adapter;
        let kernel = layer.effective_kernel(&ad).unwrap();
        assert!(kernel.max_abs_diff(&layer.weight).unwrap() < 1e-12);
        let input = Tensor::new(vec![2, 4, 4], (0..32).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let a = layer.forward(&input, None).unwrap();
        let b = layer.forward(&input, Some(&kernel)).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn identity_kernel_copies_input() {
        let mut layer = TinyConvLayer::init(1, 1, 3, &mut rng_for(0, Stream::Init, 0)).unwrap();
        layer.weight = Tensor::new(vec![1, 1, 3, 3], vec![0., 0., 0., 0., 1., 0., 0., 0., 0.]).unwrap();
        let input = Tensor::new(vec![1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(layer.forward(&input, None).unwrap().data(), input.data());
    }
}
