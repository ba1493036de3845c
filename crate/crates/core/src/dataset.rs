use serde::{Deserialize, Serialize};

/// Labeled points stored row-major.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dim: usize,
    pub x: Vec<f64>,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn new(dim: usize) -> Self {
        Self { dim, x: Vec::new(), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, point: &[f64], label: u32) {
        assert_eq!(point.len(), self.dim, "point dimension");
        self.x.extend_from_slice(point);
        self.labels.push(label);
    }

    pub fn extend(&mut self, other: &Dataset) {
        assert_eq!(self.dim, other.dim, "dataset dimension");
        self.x.extend_from_slice(&other.x);
        self.labels.extend_from_slice(&other.labels);
    }

    /// Rows whose label satisfies `keep`, in their original order.
    pub fn filter(&self, keep: impl Fn(u32) -> bool) -> Dataset {
        let mut out = Dataset::new(self.dim);
        for i in 0..self.len() {
            if keep(self.labels[i]) {
                out.push(self.point(i), self.labels[i]);
            }
        }
        out
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        let mut out = Dataset::new(self.dim);
        for &i in idx {
            out.push(self.point(i), self.labels[i]);
        }
        out
    }

    /// Sorted distinct labels.
    pub fn label_set(&self) -> Vec<u32> {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l
    }

    pub fn count(&self, label: u32) -> usize {
        self.labels.iter().filter(|&&y| y == label).count()
    }
}
