use super::{Result, Tape, Tensor, TensorError, Var};

/// Compares reverse-mode gradients of `f` with central differences.
///
/// `f` receives a fresh tape and one parameter var per entry of `params` and
/// must return a scalar. The result is the largest
/// `|analytic - numeric| / max(1, |analytic|)` over all parameter entries.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(TensorError::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out)?;
        if v.numel() != 1 {
            return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
        }
        let x = v.item();
        if !x.is_finite() {
            return Err(TensorError::NonFinite("grad_check evaluation"));
        }
        Ok(x)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out)?.all_finite() {
        return Err(TensorError::NonFinite("grad_check evaluation"));
    }
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads.get(vars[pi]).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; param.numel()]);
        if analytic.iter().any(|a| !a.is_finite()) {
            return Err(TensorError::NonFinite("grad_check analytic gradient"));
        }
        for (j, (&x, &a)) in param.data().iter().zip(&analytic).enumerate() {
            probe[pi].data_mut()[j] = x + eps;
            let up = eval(&probe)?;
            probe[pi].data_mut()[j] = x - eps;
            let down = eval(&probe)?;
            probe[pi].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * eps);
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
