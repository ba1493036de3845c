use serde::{Deserialize, Serialize};

use super::{FlowError, Result};

/// Exponential moving average over a list of parameter groups.
///
/// Before `start_epoch` the shadow simply follows the live values, so the
/// average starts from the weights reached at activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub decay: f64,
    pub start_epoch: usize,
    pub shadow: Vec<Vec<f64>>,
}

impl EmaState {
    pub fn new(decay: f64, start_epoch: usize, params: &[&[f64]]) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(FlowError::Invalid(format!("ema decay must lie in (0, 1), got {decay}")));
        }
        Ok(Self { decay, start_epoch, shadow: params.iter().map(|p| p.to_vec()).collect() })
    }

    fn check(&self, params: &[&[f64]]) -> Result<()> {
        if params.len() != self.shadow.len() || params.iter().zip(&self.shadow).any(|(p, s)| p.len() != s.len()) {
            return Err(FlowError::Invalid("ema shadow and parameters differ in shape".into()));
        }
        Ok(())
    }

    /// `shadow ← β·shadow + (1−β)·param`, once `epoch` has reached the
    /// activation epoch.
    pub fn update(&mut self, epoch: usize, params: &[&[f64]]) -> Result<()> {
        self.check(params)?;
        let active = epoch >= self.start_epoch;
        let b = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            for (sv, &pv) in s.iter_mut().zip(p.iter()) {
                *sv = if active { b * *sv + (1.0 - b) * pv } else { pv };
            }
        }
        Ok(())
    }

    /// Exchanges live and shadow values.
    pub fn swap(&mut self, params: &mut [&mut [f64]]) -> Result<()> {
        let view: Vec<&[f64]> = params.iter().map(|p| &**p).collect();
        self.check(&view)?;
        for (s, p) in self.shadow.iter_mut().zip(params.iter_mut()) {
            s.swap_with_slice(p);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn update_examples() {
        let mut e = EmaState::new(0.9, 0, &[&[0.0]]).unwrap();
        e.update(0, &[&[1.0]]).unwrap();
        assert!((e.shadow[0][0] - 0.1).abs() < 1e-15);

        let mut e = EmaState::new(0.5, 0, &[&[0.0]]).unwrap();
        e.update(0, &[&[1.0]]).unwrap();
        e.update(1, &[&[1.0]]).unwrap();
        assert_eq!(e.shadow[0][0], 0.75);

        let mut e = EmaState::new(1.0 - 1e-12, 0, &[&[0.0]]).unwrap();
        e.update(0, &[&[1.0]]).unwrap();
        assert!(e.shadow[0][0] < 1e-11);

        assert!(EmaState::new(1.0, 0, &[]).is_err());
        assert!(e.update(0, &[&[1.0, 2.0]]).is_err());
    }

    #[test]
    fn follows_until_activation_then_swaps() {
        let mut e = EmaState::new(0.5, 2, &[&[0.0, 0.0]]).unwrap();
        e.update(1, &[&[4.0, 2.0]]).unwrap();
        assert_eq!(e.shadow[0], vec![4.0, 2.0]);
        e.update(2, &[&[0.0, 0.0]]).unwrap();
        assert_eq!(e.shadow[0], vec![2.0, 1.0]);
        let mut live = vec![9.0, 9.0];
        e.swap(&mut [live.as_mut_slice()]).unwrap();
        assert_eq!(live, vec![2.0, 1.0]);
        assert_eq!(e.shadow[0], vec![9.0, 9.0]);
    }
}
