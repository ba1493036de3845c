//! Parameter-sharing variants: ratio-k reduction and a single square factor
//! shared by all adapted layers.

use serde::{Deserialize, Serialize};

use super::{FunLoraError, Result};
use crate::tensor::Tensor;

/// Factor lengths when every dimension is divided by `k` (rounded up, at
/// least 1).
pub fn reduced_dims(rows: usize, cols: usize, k: usize) -> Result<(usize, usize)> {
    if k == 0 {
        return Err(FunLoraError::Invalid("ratio k must be at least 1".into()));
    }
    Ok((rows.div_ceil(k).max(1), cols.div_ceil(k).max(1)))
}

/// Repeats every entry of `f` `k` times along both axes, then cuts the
/// result to `rows × cols`.
pub fn expand_duplicate(f: &Tensor, k: usize, rows: usize, cols: usize) -> Result<Tensor> {
    if k == 0 || f.rank() != 2 || f.rows() * k < rows || f.cols() * k < cols {
        return Err(FunLoraError::Invalid(format!("cannot expand {:?} by {k} to {rows}x{cols}", f.shape())));
    }
    let data = (0..rows).flat_map(|r| (0..cols).map(move |c| f.at(r / k, c / k))).collect();
    Ok(Tensor::matrix(rows, cols, data)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqrtSegment {
    pub layer: usize,
    pub start: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Shared square factorization over a set of layers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqrtPlan {
    /// Length of both shared factors; `F` is `dim × dim`.
    pub dim: usize,
    pub segments: Vec<SqrtSegment>,
}

impl SqrtPlan {
    pub fn total(&self) -> usize {
        self.segments.iter().map(|s| s.rows * s.cols).sum()
    }

    /// The part of a flattened shared `F` that belongs to `layer`.
    pub fn slice_for_layer(&self, f_flat: &[f64], layer: usize) -> Result<Tensor> {
        let seg = self
            .segments
            .iter()
            .find(|s| s.layer == layer)
            .ok_or_else(|| FunLoraError::Invalid(format!("layer {layer} is not in the shared plan")))?;
        let end = seg.start + seg.rows * seg.cols;
        if f_flat.len() < end {
            return Err(FunLoraError::Invalid(format!("shared matrix has {} entries, need {end}", f_flat.len())));
        }
        Ok(Tensor::matrix(seg.rows, seg.cols, f_flat[seg.start..end].to_vec())?)
    }
}

fn ceil_sqrt(n: usize) -> usize {
    let mut d = (n as f64).sqrt() as usize;
    while d * d < n {
        d += 1;
    }
    while d > 0 && (d - 1) * (d - 1) >= n {
        d -= 1;
    }
    d
}

/// Lays out `layers` (index, rows, cols) back to back in ascending index
/// order inside one `⌈√n⌉ × ⌈√n⌉` matrix.
pub fn sqrt_factorize(layers: &[(usize, usize, usize)]) -> Result<SqrtPlan> {
    let mut sorted = layers.to_vec();
    sorted.sort_by_key(|l| l.0);
    let n: usize = sorted.iter().map(|&(_, r, c)| r * c).sum();
    if n == 0 {
        return Err(FunLoraError::Invalid("square-root factorization needs at least one entry".into()));
    }
    let dim = ceil_sqrt(n);
    assert!(dim * dim >= n);
    let mut start = 0;
    let segments = sorted
        .into_iter()
        .map(|(layer, rows, cols)| {
            let s = SqrtSegment { layer, start, rows, cols };
            start += rows * cols;
            s
        })
        .collect();
    Ok(SqrtPlan { dim, segments })
}
