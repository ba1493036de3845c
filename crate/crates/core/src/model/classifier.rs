use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::dense::{affine, silu, Dense};
use super::{ModelError, Result};
use crate::dataset::Dataset;
use crate::optim::Sgd;
use crate::rng::{rng_for, Stream};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { hidden: 32, epochs: 30, batch_size: 64, lr: 0.05, momentum: 0.9 }
    }
}

/// Two hidden layers with SiLU, softmax head. Inputs are standardized with
/// statistics of the training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierNet {
    layers: Vec<Dense>,
    num_classes: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl ClassifierNet {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn standardize(&self, data: &Dataset) -> Vec<f64> {
        let d = data.dim;
        data.x.iter().enumerate().map(|(i, v)| (v - self.mean[i % d]) / self.scale[i % d]).collect()
    }

    pub fn logits(&self, data: &Dataset) -> Vec<f64> {
        let mut h = self.standardize(data);
        let n = data.len();
        let last = self.layers.len() - 1;
        for (l, d) in self.layers.iter().enumerate() {
            h = affine(&h, n, &d.weight, &d.bias);
            if l != last {
                h.iter_mut().for_each(|v| *v = silu(*v));
            }
        }
        h
    }

    pub fn predict(&self, data: &Dataset) -> Vec<u32> {
        let logits = self.logits(data);
        logits
            .chunks(self.num_classes)
            .map(|row| {
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                best as u32
            })
            .collect()
    }
}

fn check_labels(data: &Dataset, num_classes: usize) -> Result<()> {
    if let Some(&bad) = data.labels.iter().find(|&&y| y as usize >= num_classes) {
        return Err(ModelError::Invalid(format!("label {bad} outside a head of {num_classes} classes")));
    }
    Ok(())
}

/// Trains a fresh classifier with minibatch SGD.
pub fn classifier_train(
    data: &Dataset,
    num_classes: usize,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<ClassifierNet> {
    if data.is_empty() {
        return Err(ModelError::Invalid("classifier training set is empty".into()));
    }
    if num_classes == 0 || cfg.batch_size == 0 {
        return Err(ModelError::Invalid("classifier needs classes and a positive batch size".into()));
    }
    check_labels(data, num_classes)?;
    let d = data.dim;
    let n = data.len();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        mean.iter_mut().zip(data.point(i)).for_each(|(m, v)| *m += v / n as f64);
    }
    let mut scale = vec![0.0; d];
    for i in 0..n {
        scale.iter_mut().zip(data.point(i)).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2) / n as f64);
    }
    scale.iter_mut().for_each(|s| *s = if *s > 1e-12 { s.sqrt() } else { 1.0 });

    let mut rng = rng_for(seed, Stream::Classifier, 0);
    let dims = [d, cfg.hidden, cfg.hidden, num_classes];
    let layers = dims.windows(2).map(|w| Dense::init(w[0], w[1], &mut rng)).collect();
    let mut net = ClassifierNet { layers, num_classes, mean, scale };
    let inputs = net.standardize(data);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let xb: Vec<f64> = chunk.iter().flat_map(|&i| inputs[i * d..(i + 1) * d].iter().copied()).collect();
            let yb: Vec<usize> = chunk.iter().map(|&i| data.labels[i] as usize).collect();
            let mut h = tape.constant(Tensor::matrix(chunk.len(), d, xb)?);
            let mut params = Vec::new();
            let last = net.layers.len() - 1;
            for (l, layer) in net.layers.iter().enumerate() {
                let w = tape.param(layer.weight.clone());
                let b = tape.param(Tensor::matrix(1, layer.bias.len(), layer.bias.clone())?);
                params.extend([w, b]);
                h = tape.matmul_nt(h, w)?;
                h = tape.add_row(h, b)?;
                if l != last {
                    h = tape.silu(h)?;
                }
            }
            let loss = tape.softmax_cross_entropy(h, &yb)?;
            let grads = tape.backward(loss)?;
            let g: Vec<Vec<f64>> =
                params.iter().map(|&p| grads.get(p).map(|t| t.data().to_vec()).unwrap_or_default()).collect();
            let gs: Vec<&[f64]> = g.iter().map(Vec::as_slice).collect();
            let mut slices: Vec<&mut [f64]> = Vec::new();
            for layer in net.layers.iter_mut() {
                slices.push(layer.weight.data_mut());
                slices.push(&mut layer.bias);
            }
            opt.step(&mut slices, &gs);
        }
    }
    Ok(net)
}

/// Accuracy in percent.
pub fn classifier_eval(net: &ClassifierNet, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(ModelError::Invalid("evaluation set is empty".into()));
    }
    check_labels(data, net.num_classes)?;
    let pred = net.predict(data);
    let correct = pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn two_blobs(sigma: f64, n: usize, seed: u64) -> Dataset {
        let mut rng = rng_for(seed, Stream::Data, 0);
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut d = Dataset::new(2);
        for i in 0..2 * n {
            let y = (i % 2) as u32;
            let cx = if y == 0 { -2.0 } else { 2.0 };
            d.push(&[cx + noise.sample(&mut rng), noise.sample(&mut rng)], y);
        }
        d
    }

    #[test]
    fn separable_blobs_are_learned() {
        let train = two_blobs(0.1, 200, 1);
        let test = two_blobs(0.1, 200, 2);
        let net = classifier_train(&train, 2, &ClassifierConfig { epochs: 5, ..Default::default() }, 0).unwrap();
        assert!(classifier_eval(&net, &test).unwrap() > 99.0);
    }

    #[test]
    fn empty_and_out_of_range_are_errors() {
        let train = two_blobs(0.5, 20, 1);
        let net = classifier_train(&train, 2, &ClassifierConfig { epochs: 1, ..Default::default() }, 0).unwrap();
        assert!(classifier_eval(&net, &Dataset::new(2)).is_err());
        let mut bad = Dataset::new(2);
        bad.push(&[0.0, 0.0], 5);
        assert!(classifier_eval(&net, &bad).is_err());
        assert!(classifier_train(&bad, 2, &ClassifierConfig::default(), 0).is_err());
    }

    #[test]
    fn training_set_accuracy_not_below_reported() {
        let train = two_blobs(1.2, 100, 3);
        let net = classifier_train(&train, 2, &ClassifierConfig { epochs: 10, ..Default::default() }, 0).unwrap();
        let a = classifier_eval(&net, &train).unwrap();
        let dup = train.clone();
        assert!(classifier_eval(&net, &dup).unwrap() >= a);
    }
}
