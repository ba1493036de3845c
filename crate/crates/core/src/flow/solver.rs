use serde::{Deserialize, Serialize};

use super::{FlowError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    Euler { steps: usize },
    Rk4 { steps: usize },
    Dopri5 { abs_tol: f64, rel_tol: f64 },
}

/// Integration always runs from t = 1 (noise) to t = 0 (data).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        match self.method {
            Method::Euler { steps } | Method::Rk4 { steps } if steps == 0 => {
                Err(FlowError::Invalid("fixed-step solvers need at least one step".into()))
            }
            Method::Dopri5 { abs_tol, rel_tol } if !(abs_tol > 0.0 && rel_tol > 0.0) => {
                Err(FlowError::Invalid("tolerances must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub x: Vec<f64>,
    /// Field evaluations actually performed.
    pub nfe: usize,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

/// Step count for a fixed-step solver given an NFE budget. The budget is
/// read as a number of steps, whatever the evaluations per step.
pub fn nfe_budget_to_steps(method: &Method, nfe: usize) -> Result<usize> {
    if nfe == 0 {
        return Err(FlowError::Invalid("nfe budget must be at least 1".into()));
    }
    match method {
        Method::Euler { .. } | Method::Rk4 { .. } => Ok(nfe),
        Method::Dopri5 { .. } => Err(FlowError::Invalid("adaptive solvers take tolerances, not a budget".into())),
    }
}

const H0: f64 = 1.0 / 50.0;
const MIN_STEP: f64 = 1e-10;
const SAFETY: f64 = 0.9;
const MAX_FACTOR: f64 = 10.0;
const MIN_FACTOR: f64 = 0.2;

// Dormand–Prince 5(4)
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] =
    [5179.0 / 57600.0, 0.0, 7571.0 / 16695.0, 393.0 / 640.0, -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0];

fn axpy(x: &[f64], h: f64, terms: &[(f64, &[f64])]) -> Vec<f64> {
    let mut out = x.to_vec();
    for &(w, k) in terms {
        if w != 0.0 {
            out.iter_mut().zip(k).for_each(|(o, v)| *o += h * w * v);
        }
    }
    out
}

/// Integrates `dx/dt = field(t, x)` from t = 1 down to t = 0.
pub fn integrate<F>(mut field: F, x_start: &[f64], cfg: &SolverConfig) -> Result<Solution>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let mut nfe = 0;
    let mut eval = |t: f64, x: &[f64], nfe: &mut usize| -> Result<Vec<f64>> {
        *nfe += 1;
        let v = field(t, x)?;
        if v.len() != x.len() {
            return Err(FlowError::Invalid(format!("field returned {} entries for a state of {}", v.len(), x.len())));
        }
        if v.iter().any(|y| !y.is_finite()) {
            return Err(FlowError::NonFinite(t));
        }
        Ok(v)
    };
    let mut x = x_start.to_vec();
    match cfg.method {
        Method::Euler { steps } => {
            let dt = -1.0 / steps as f64;
            for s in 0..steps {
                let t = 1.0 - s as f64 / steps as f64;
                let k = eval(t, &x, &mut nfe)?;
                x = axpy(&x, dt, &[(1.0, &k)]);
            }
            Ok(Solution { x, nfe, accepted_steps: steps, rejected_steps: 0 })
        }
        Method::Rk4 { steps } => {
            let dt = -1.0 / steps as f64;
            for s in 0..steps {
                let t = 1.0 - s as f64 / steps as f64;
                let k1 = eval(t, &x, &mut nfe)?;
                let k2 = eval(t + 0.5 * dt, &axpy(&x, 0.5 * dt, &[(1.0, &k1)]), &mut nfe)?;
                let k3 = eval(t + 0.5 * dt, &axpy(&x, 0.5 * dt, &[(1.0, &k2)]), &mut nfe)?;
                let k4 = eval(t + dt, &axpy(&x, dt, &[(1.0, &k3)]), &mut nfe)?;
                x = axpy(&x, dt / 6.0, &[(1.0, &k1), (2.0, &k2), (2.0, &k3), (1.0, &k4)]);
            }
            Ok(Solution { x, nfe, accepted_steps: steps, rejected_steps: 0 })
        }
        Method::Dopri5 { abs_tol, rel_tol } => {
            let mut t = 1.0;
            let mut h = H0;
            let mut prev_err: f64 = 1e-4;
            let (mut accepted, mut rejected) = (0, 0);
            let mut k1 = eval(t, &x, &mut nfe)?;
            while t > 0.0 {
                if h < MIN_STEP {
                    return Err(FlowError::StepUnderflow { t, min: MIN_STEP });
                }
                let h_step = h.min(t);
                let dt = -h_step;
                let mut k: Vec<Vec<f64>> = vec![k1.clone()];
                for stage in 1..7 {
                    let terms: Vec<(f64, &[f64])> = (0..stage).map(|j| (A[stage][j], k[j].as_slice())).collect();
                    let xs = axpy(&x, dt, &terms);
                    k.push(eval(t + C[stage] * dt, &xs, &mut nfe)?);
                }
                let terms5: Vec<(f64, &[f64])> = (0..7).map(|j| (B5[j], k[j].as_slice())).collect();
                let x5 = axpy(&x, dt, &terms5);
                let err_sq: f64 = (0..x.len())
                    .map(|i| {
                        let e: f64 = (0..7).map(|j| (B5[j] - B4[j]) * k[j][i]).sum::<f64>() * dt;
                        let scale = abs_tol + rel_tol * x[i].abs().max(x5[i].abs());
                        (e / scale).powi(2)
                    })
                    .sum();
                let err = (err_sq / x.len().max(1) as f64).sqrt();
                if err <= 1.0 {
                    t -= h_step;
                    if t < 1e-14 {
                        t = 0.0;
                    }
                    x = x5;
                    // first-same-as-last: the 7th stage is the next step's first
                    k1 = k.pop().expect("seven stages");
                    accepted += 1;
                    let factor = if err == 0.0 {
                        MAX_FACTOR
                    } else {
                        (SAFETY * err.powf(-0.7 / 5.0) * prev_err.powf(0.4 / 5.0)).clamp(MIN_FACTOR, MAX_FACTOR)
                    };
                    prev_err = err.max(1e-4);
                    h = h_step * factor;
                } else {
                    rejected += 1;
                    h = h_step * (SAFETY * err.powf(-1.0 / 5.0)).max(MIN_FACTOR);
                }
            }
            Ok(Solution { x, nfe, accepted_steps: accepted, rejected_steps: rejected })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(method: Method) -> SolverConfig {
        SolverConfig { method }
    }

    const METHODS: [Method; 3] =
        [Method::Euler { steps: 7 }, Method::Rk4 { steps: 3 }, Method::Dopri5 { abs_tol: 1e-4, rel_tol: 1e-4 }];

    #[test]
    fn constant_field_is_exact() {
        for m in METHODS {
            let s = integrate(|_, _| Ok(vec![-1., 1.]), &[0., 1.], &cfg(m)).unwrap();
            assert!((s.x[0] - 1.0).abs() < 1e-12 && s.x[1].abs() < 1e-12, "{m:?}: {:?}", s.x);
        }
    }

    #[test]
    fn zero_field_keeps_start() {
        for m in METHODS {
            let s = integrate(|_, x| Ok(vec![0.0; x.len()]), &[0.3, -2.0], &cfg(m)).unwrap();
            assert_eq!(s.x, vec![0.3, -2.0]);
        }
    }

    #[test]
    fn decay_field_reaches_e() {
        let e = std::f64::consts::E;
        let rk = integrate(|_, x| Ok(x.iter().map(|v| -v).collect()), &[1.0], &cfg(Method::Rk4 { steps: 50 })).unwrap();
        assert!((rk.x[0] - e).abs() < 1e-7);
        let dp = integrate(
            |_, x| Ok(x.iter().map(|v| -v).collect()),
            &[1.0],
            &cfg(Method::Dopri5 { abs_tol: 1e-4, rel_tol: 1e-4 }),
        )
        .unwrap();
        assert!((dp.x[0] - e).abs() < 1e-3, "{}", dp.x[0]);
        assert_eq!(dp.nfe, 1 + 6 * (dp.accepted_steps + dp.rejected_steps));
    }

    #[test]
    fn fixed_step_nfe() {
        let s = integrate(|_, x| Ok(x.to_vec()), &[1.0], &cfg(Method::Rk4 { steps: 5 })).unwrap();
        assert_eq!(s.nfe, 20);
        let s = integrate(|_, x| Ok(x.to_vec()), &[1.0], &cfg(Method::Euler { steps: 4 })).unwrap();
        assert_eq!(s.nfe, 4);
        assert_eq!(nfe_budget_to_steps(&Method::Rk4 { steps: 1 }, 5).unwrap(), 5);
        assert_eq!(nfe_budget_to_steps(&Method::Euler { steps: 1 }, 1).unwrap(), 1);
        assert_eq!(nfe_budget_to_steps(&Method::Rk4 { steps: 1 }, 20).unwrap(), 20);
    }

    #[test]
    fn stiff_field_underflows() {
        let r = integrate(
            |t, x| Ok(x.iter().map(|_| 1.0 / (t - 0.5)).collect()),
            &[0.0],
            &cfg(Method::Dopri5 { abs_tol: 1e-12, rel_tol: 1e-12 }),
        );
        assert!(matches!(r, Err(FlowError::StepUnderflow { .. }) | Err(FlowError::NonFinite(_))), "{r:?}");
    }
}
