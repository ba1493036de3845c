use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{FlowError, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct PathSample {
    pub x0: Vec<f64>,
    pub z: Vec<f64>,
    pub t: f64,
    pub x_t: Vec<f64>,
    pub u_target: Vec<f64>,
}

/// Point on the straight path from `x0` (t = 0) to `z` (t = 1) and the
/// path's velocity `z - x0`.
pub fn ot_path(x0: &[f64], z: &[f64], t: f64) -> Result<PathSample> {
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::TimeOutOfRange(t));
    }
    if x0.len() != z.len() {
        return Err(FlowError::Invalid(format!("x0 has {} entries, z has {}", x0.len(), z.len())));
    }
    let x_t = x0.iter().zip(z).map(|(a, b)| (1.0 - t) * a + t * b).collect();
    let u_target = x0.iter().zip(z).map(|(a, b)| b - a).collect();
    Ok(PathSample { x0: x0.to_vec(), z: z.to_vec(), t, x_t, u_target })
}

/// Per-sample times and noise for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PathDraws {
    pub t: Vec<f64>,
    /// Row-major `batch × dim`.
    pub z: Vec<f64>,
}

impl PathDraws {
    pub fn sample<R: Rng + ?Sized>(batch: usize, dim: usize, rng: &mut R) -> Self {
        let t = (0..batch).map(|_| rng.random::<f64>()).collect();
        let z = (0..batch * dim).map(|_| StandardNormal.sample(rng)).collect();
        Self { t, z }
    }
}

/// Mean over batch and dimensions of `(v(t, x_t, y) - (z - x0))²`.
///
/// `x0` is `batch × dim`. `field` receives the tape, the times, the
/// interpolated points (as a constant) and the labels, and returns the
/// predicted velocities with the same shape as `x0`.
pub fn cfm_loss<F>(tape: &mut Tape, x0: &Tensor, labels: &[u32], draws: &PathDraws, field: F) -> Result<Var>
where
    F: FnOnce(&mut Tape, &[f64], Var, &[u32]) -> std::result::Result<Var, FlowError>,
{
    if x0.numel() == 0 || x0.rank() != 2 || x0.rows() == 0 {
        return Err(FlowError::Invalid("empty batch".into()));
    }
    let (n, d) = (x0.rows(), x0.cols());
    if labels.len() != n || draws.t.len() != n || draws.z.len() != n * d {
        return Err(FlowError::Invalid(format!(
            "batch of {n} with {} labels, {} times, {} noise entries",
            labels.len(),
            draws.t.len(),
            draws.z.len()
        )));
    }
    let mut x_t = Vec::with_capacity(n * d);
    let mut u = Vec::with_capacity(n * d);
    for r in 0..n {
        let s = ot_path(x0.row(r), &draws.z[r * d..(r + 1) * d], draws.t[r])?;
        x_t.extend(s.x_t);
        u.extend(s.u_target);
    }
    let x_t = tape.constant(Tensor::matrix(n, d, x_t)?);
    let u = tape.constant(Tensor::matrix(n, d, u)?);
    let v = field(tape, &draws.t, x_t, labels)?;
    let diff = tape.sub(v, u)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_examples() {
        let s = ot_path(&[1., 0.], &[0., 1.], 0.5).unwrap();
        assert_eq!(s.x_t, vec![0.5, 0.5]);
        assert_eq!(s.u_target, vec![-1., 1.]);
        assert_eq!(ot_path(&[3., 4.], &[7., 8.], 0.0).unwrap().x_t, vec![3., 4.]);
        assert_eq!(ot_path(&[3., 4.], &[7., 8.], 1.0).unwrap().x_t, vec![7., 8.]);
        assert!(matches!(ot_path(&[0.], &[0.], 1.5), Err(FlowError::TimeOutOfRange(_))));
    }

    #[test]
    fn loss_examples() {
        // zero predictor, x0 = 1, z = 0 -> target -1, loss 1
        let mut tape = Tape::new();
        let x0 = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let draws = PathDraws { t: vec![0.5], z: vec![0.0] };
        let loss =
            cfm_loss(&mut tape, &x0, &[0], &draws, |tape, _, _, _| Ok(tape.constant(Tensor::zeros(&[1, 1])))).unwrap();
        assert_eq!(tape.value(loss).unwrap().item(), 1.0);

        // the exact field gives zero loss
        let x0 = Tensor::matrix(2, 2, vec![1., -2., 0.5, 3.]).unwrap();
        let draws = PathDraws { t: vec![0.2, 0.9], z: vec![0.3, 0.1, -1., 2.] };
        let exact: Vec<f64> = draws.z.iter().zip(x0.data()).map(|(z, x)| z - x).collect();
        let mut tape = Tape::new();
        let loss = cfm_loss(&mut tape, &x0, &[0, 1], &draws, |tape, _, _, _| {
            Ok(tape.constant(Tensor::matrix(2, 2, exact.clone())?))
        })
        .unwrap();
        assert_eq!(tape.value(loss).unwrap().item(), 0.0);
    }
}
