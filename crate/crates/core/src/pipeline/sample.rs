use rand_distr::{Distribution, StandardNormal};

use super::Result;
use crate::dataset::Dataset;
use crate::flow::{integrate, SolverConfig};
use crate::model::{ClassField, VectorFieldNet};
use crate::par;
use crate::rng::{rng_for, Stream};

/// A synthetic dataset with its sampling cost.
#[derive(Clone, Debug, PartialEq)]
pub struct Synthetic {
    pub data: Dataset,
    /// Field evaluations summed over classes.
    pub nfe: usize,
}

fn sampler_index(stage: usize, label: u32) -> u64 {
    ((stage as u64) << 32) | label as u64
}

/// Integrates `count` noise draws from t = 1 to t = 0 as one batch.
pub fn sample_field(
    field: &ClassField,
    dim: usize,
    count: usize,
    solver: &SolverConfig,
    seed: u64,
    stage: usize,
    label: u32,
) -> Result<(Vec<f64>, usize)> {
    let mut rng = rng_for(seed, Stream::Sampler, sampler_index(stage, label));
    let z: Vec<f64> = (0..count * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let sol = integrate(|t, x| Ok(field.velocity(t, x)), &z, solver)?;
    Ok((sol.x, sol.nfe))
}

/// Samples `per_class` points for each label, in parallel across labels.
pub fn synthesize(
    net: &VectorFieldNet,
    labels: &[u32],
    per_class: usize,
    solver: &SolverConfig,
    seed: u64,
    stage: usize,
) -> Result<Synthetic> {
    solver.validate()?;
    let dim = net.config().data_dim;
    let parts = par::map(labels, |&y| -> Result<(Vec<f64>, usize)> {
        let field = net.class_field(y)?;
        sample_field(&field, dim, per_class, solver, seed, stage, y)
    });
    let mut data = Dataset::new(dim);
    let mut nfe = 0;
    for (&y, part) in labels.iter().zip(parts) {
        let (x, n) = part?;
        for row in x.chunks(dim) {
            data.push(row, y);
        }
        nfe += n;
    }
    Ok(Synthetic { data, nfe })
}
