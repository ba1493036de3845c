use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Average accuracy: mean of the per-task scores.
pub fn aa(scores: &[f64]) -> Result<f64> {
    mean(scores)
}

/// Average incremental accuracy: mean of the running averages.
pub fn aia(running: &[f64]) -> Result<f64> {
    mean(running)
}

/// Running averages `AA_1..AA_T`.
pub fn running_aa(scores: &[f64]) -> Result<Vec<f64>> {
    (1..=scores.len()).map(|t| aa(&scores[..t])).collect()
}

fn mean(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(PipelineError::Invalid("mean of no scores".into()));
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task_index: usize,
    pub classes: Vec<u32>,
    pub a_t: f64,
    pub aa_t: f64,
    /// Training points fed to the generative model during this task.
    pub generative_samples_seen: usize,
    /// Parameters trained for each new class of this task.
    pub trainable_params_per_class: usize,
    /// Field evaluations used to sample the synthetic set.
    pub nfe: usize,
    pub synthetic_per_class: usize,
    pub train_seconds: f64,
    pub sample_seconds: f64,
    pub classifier_seconds: f64,
}

/// Scores of one run. Derived values are always recomputed from `a_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema_version: u32,
    pub method: String,
    pub seed: u64,
    pub tasks: Vec<TaskMetrics>,
    pub aa: f64,
    pub aia: f64,
    pub la: f64,
    /// Parameters per class added by the adapters.
    pub ppc: usize,
    pub wall_seconds: f64,
}

impl MetricsRecord {
    pub fn scores(&self) -> Vec<f64> {
        self.tasks.iter().map(|t| t.a_t).collect()
    }

    /// Fills `aa_t`, `aa`, `aia` and `la` from the stored scores.
    pub fn recompute(&mut self) -> Result<()> {
        let scores = self.scores();
        let running = running_aa(&scores)?;
        for (t, r) in self.tasks.iter_mut().zip(&running) {
            t.aa_t = *r;
        }
        self.aa = aa(&scores)?;
        self.aia = aia(&running)?;
        self.la = *running.last().expect("non-empty");
        Ok(())
    }

    /// Copy with every timing field zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        r.wall_seconds = 0.0;
        for t in &mut r.tasks {
            t.train_seconds = 0.0;
            t.sample_seconds = 0.0;
            t.classifier_seconds = 0.0;
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_examples() {
        assert_eq!(aa(&[100.0, 50.0]).unwrap(), 75.0);
        assert_eq!(aia(&[100.0, 75.0]).unwrap(), 87.5);
        let single = [63.0];
        assert_eq!(aa(&single).unwrap(), 63.0);
        assert_eq!(aia(&running_aa(&single).unwrap()).unwrap(), 63.0);
        assert!(aa(&[]).is_err());
    }
}
