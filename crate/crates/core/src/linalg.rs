//! Singular values via one-sided Jacobi rotations.

use crate::tensor::{Result, Tensor, TensorError};

pub const DEFAULT_RANK_TOL: f64 = 1e-8;

const MAX_SWEEPS: usize = 60;

/// Singular values of a 2-D tensor, sorted descending.
pub fn singular_values(m: &Tensor) -> Result<Vec<f64>> {
    if m.rank() != 2 {
        return Err(TensorError::InvalidArgument(format!("singular values of rank-{} tensor", m.rank())));
    }
    if !m.all_finite() {
        return Err(TensorError::NonFinite("singular_values"));
    }
    // Work on columns; keep the column count at most the row count.
    let work = if m.cols() > m.rows() { m.transpose()? } else { m.clone() };
    let (rows, cols) = (work.rows(), work.cols());
    // Column-major copy so each column is contiguous.
    let mut c: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| work.at(i, j)).collect()).collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&c[p], &c[q]);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        a += x * x;
                        b += y * y;
                        g += x * y;
                    }
                    (a, b, g)
                };
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                let (left, right) = c.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (xo, yo) = (*x, *y);
                    *x = cs * xo - sn * yo;
                    *y = sn * xo + cs * yo;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut s: Vec<f64> = c.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Count of singular values above `rel_tol · σ_max`. The zero matrix has rank 0.
pub fn numerical_rank(m: &Tensor, rel_tol: f64) -> Result<usize> {
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(TensorError::InvalidArgument(format!("rel_tol must lie in (0, 1), got {rel_tol}")));
    }
    let s = singular_values(m)?;
    let max = s.first().copied().unwrap_or(0.0);
    if max == 0.0 {
        return Ok(0);
    }
    Ok(s.iter().filter(|&&x| x > rel_tol * max).count())
}
