use std::collections::BTreeSet;
use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::dataset::Dataset;
use crate::rng::{rng_for, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Isotropic Gaussians with centers evenly spaced on a circle.
    Gaussian,
    /// Thin rings of class-specific radius centered on the same circle.
    Rings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub family: Family,
    pub tasks: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Radius of the circle carrying the class centers.
    pub radius: f64,
    /// Gaussian std, or radial noise of the rings.
    pub sigma: f64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            family: Family::Gaussian,
            tasks: 5,
            classes_per_task: 2,
            train_per_class: 500,
            test_per_class: 200,
            radius: 4.0,
            sigma: 0.5,
        }
    }
}

impl StreamSpec {
    pub fn num_classes(&self) -> usize {
        self.tasks * self.classes_per_task
    }

    /// Center of class `k`.
    pub fn center(&self, k: u32) -> [f64; 2] {
        let a = TAU * k as f64 / self.num_classes() as f64;
        [self.radius * a.cos(), self.radius * a.sin()]
    }

    fn ring_radius(&self, k: u32) -> f64 {
        // keep every ring inside half the spacing between neighbouring centers
        let spacing = 2.0 * self.radius * (std::f64::consts::PI / self.num_classes() as f64).sin();
        spacing * (0.2 + 0.1 * (k % 3) as f64)
    }

    fn draw<R: Rng + ?Sized>(&self, k: u32, rng: &mut R) -> [f64; 2] {
        let c = self.center(k);
        let noise = Normal::new(0.0, self.sigma).expect("sigma validated");
        match self.family {
            Family::Gaussian => [c[0] + noise.sample(rng), c[1] + noise.sample(rng)],
            Family::Rings => {
                let theta = rng.random::<f64>() * TAU;
                let r = self.ring_radius(k) + noise.sample(rng);
                [c[0] + r * theta.cos(), c[1] + r * theta.sin()]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub labels: Vec<u32>,
    pub train: Dataset,
    pub test: Dataset,
}

/// Ordered tasks with pairwise disjoint label sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn from_tasks(tasks: Vec<Task>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(PipelineError::Invalid("a stream needs at least one task".into()));
        }
        let mut seen = BTreeSet::new();
        for t in &tasks {
            if t.labels.is_empty() {
                return Err(PipelineError::Invalid("every task needs a class".into()));
            }
            for &y in &t.labels {
                if !seen.insert(y) {
                    return Err(PipelineError::OverlappingLabels(y));
                }
            }
            for d in [&t.train, &t.test] {
                if let Some(&y) = d.labels.iter().find(|y| !t.labels.contains(y)) {
                    return Err(PipelineError::Invalid(format!("task data carries foreign label {y}")));
                }
            }
        }
        Ok(Self { tasks })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Labels of tasks `1..=t`.
    pub fn labels_upto(&self, t: usize) -> Vec<u32> {
        self.tasks[..t].iter().flat_map(|k| k.labels.iter().copied()).collect()
    }

    pub fn train_upto(&self, t: usize) -> Dataset {
        self.merge(t, |k| &k.train)
    }

    pub fn test_upto(&self, t: usize) -> Dataset {
        self.merge(t, |k| &k.test)
    }

    fn merge(&self, t: usize, pick: impl Fn(&Task) -> &Dataset) -> Dataset {
        let mut out = Dataset::new(pick(&self.tasks[0]).dim);
        for k in &self.tasks[..t] {
            out.extend(pick(k));
        }
        out
    }

    pub fn train_per_class(&self) -> usize {
        let t = &self.tasks[0];
        t.train.count(t.labels[0])
    }
}

/// Builds a stream whose labels run `0, 1, …` in task order.
pub fn make_task_stream(spec: &StreamSpec, seed: u64) -> Result<TaskStream> {
    if spec.tasks < 2 || spec.classes_per_task == 0 {
        return Err(PipelineError::Invalid("a stream needs at least two tasks with one class each".into()));
    }
    if spec.train_per_class == 0 || spec.test_per_class == 0 || !(spec.sigma > 0.0) || !(spec.radius > 0.0) {
        return Err(PipelineError::Invalid("sample counts, radius and sigma must be positive".into()));
    }
    let mut tasks = Vec::with_capacity(spec.tasks);
    for t in 0..spec.tasks {
        let labels: Vec<u32> = (0..spec.classes_per_task).map(|j| (t * spec.classes_per_task + j) as u32).collect();
        let mut train = Dataset::new(2);
        let mut test = Dataset::new(2);
        for &y in &labels {
            let mut rng = rng_for(seed, Stream::Data, y as u64);
            for _ in 0..spec.train_per_class {
                train.push(&spec.draw(y, &mut rng), y);
            }
            for _ in 0..spec.test_per_class {
                test.push(&spec.draw(y, &mut rng), y);
            }
        }
        tasks.push(Task { labels, train, test });
    }
    TaskStream::from_tasks(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_stream_shape() {
        let s = make_task_stream(&StreamSpec::default(), 0).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s.labels_upto(5), (0..10).collect::<Vec<u32>>());
        for t in &s.tasks {
            assert_eq!(t.train.len(), 1000);
            assert_eq!(t.test.len(), 400);
        }
    }

    #[test]
    fn seeds_change_draws_not_shapes() {
        let a = make_task_stream(&StreamSpec::default(), 0).unwrap();
        let b = make_task_stream(&StreamSpec::default(), 1).unwrap();
        assert_ne!(a.tasks[0].train.x, b.tasks[0].train.x);
        assert_eq!(a.tasks[0].train.x.len(), b.tasks[0].train.x.len());
        assert_eq!(a, make_task_stream(&StreamSpec::default(), 0).unwrap());
    }

    #[test]
    fn overlapping_labels_rejected() {
        let mut d = Dataset::new(2);
        d.push(&[0.0, 0.0], 1);
        let t = Task { labels: vec![1], train: d.clone(), test: d };
        assert_eq!(TaskStream::from_tasks(vec![t.clone(), t]).unwrap_err(), PipelineError::OverlappingLabels(1));
    }

    #[test]
    fn rings_separate_by_nearest_centroid() {
        let spec = StreamSpec { family: Family::Rings, sigma: 0.05, ..StreamSpec::default() };
        let s = make_task_stream(&spec, 3).unwrap();
        let test = s.test_upto(5);
        let train = s.train_upto(5);
        let centroids: Vec<[f64; 2]> = (0..10u32)
            .map(|y| {
                let d = train.filter(|l| l == y);
                let n = d.len() as f64;
                let sx: f64 = (0..d.len()).map(|i| d.point(i)[0]).sum();
                let sy: f64 = (0..d.len()).map(|i| d.point(i)[1]).sum();
                [sx / n, sy / n]
            })
            .collect();
        let correct = (0..test.len())
            .filter(|&i| {
                let p = test.point(i);
                let best = (0..10)
                    .min_by(|&a, &b| {
                        let da = (p[0] - centroids[a][0]).powi(2) + (p[1] - centroids[a][1]).powi(2);
                        let db = (p[0] - centroids[b][0]).powi(2) + (p[1] - centroids[b][1]).powi(2);
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best as u32 == test.labels[i]
            })
            .count();
        assert!(100.0 * correct as f64 / test.len() as f64 > 95.0);
    }
}
