use serde::{Deserialize, Serialize};

use super::{Adapter, AdapterStore, Combine, FunLoraError, FunctionalKind, Layout, Result};
use crate::linalg::numerical_rank;
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankEntry {
    pub layer_index: usize,
    pub class_label: u32,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRank {
    pub class_label: u32,
    pub max: usize,
    pub mean: f64,
}

/// Ranks per (layer, class) with per-class and class-averaged aggregates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub entries: Vec<RankEntry>,
    pub per_class: Vec<ClassRank>,
    /// Class average of the per-class maximum over layers.
    pub max: f64,
    /// Class average of the per-class mean over layers.
    pub mean: f64,
    /// Largest rank anywhere in the store.
    pub overall_max: usize,
}

pub fn rank_report(store: &AdapterStore, rel_tol: f64) -> Result<RankReport> {
    let labels: Vec<u32> = store.labels().collect();
    let per_label = par::map(&labels, |&label| -> Result<Vec<RankEntry>> {
        store
            .layer_matrices(label)?
            .into_iter()
            .map(|(layer_index, m)| {
                Ok(RankEntry { layer_index, class_label: label, rank: numerical_rank(&m, rel_tol)? })
            })
            .collect()
    });
    let mut entries = Vec::new();
    let mut per_class = Vec::new();
    for (label, ranks) in labels.iter().zip(per_label) {
        let ranks = ranks?;
        let max = ranks.iter().map(|e| e.rank).max().unwrap_or(0);
        let mean = ranks.iter().map(|e| e.rank as f64).sum::<f64>() / ranks.len().max(1) as f64;
        per_class.push(ClassRank { class_label: *label, max, mean });
        entries.extend(ranks);
    }
    let n = per_class.len().max(1) as f64;
    Ok(RankReport {
        max: per_class.iter().map(|c| c.max as f64).sum::<f64>() / n,
        mean: per_class.iter().map(|c| c.mean).sum::<f64>() / n,
        overall_max: entries.iter().map(|e| e.rank).max().unwrap_or(0),
        entries,
        per_class,
    })
}

/// Mean L1 distance of both factors from their all-ones starting point.
pub fn importance(adapter: &Adapter) -> Result<f64> {
    if adapter.combine != Combine::Mul {
        return Err(FunLoraError::NotMulConvention(adapter.combine));
    }
    let dist = |v: &[f64]| v.iter().map(|x| (x - 1.0).abs()).sum::<f64>() / v.len() as f64;
    Ok(0.5 * (dist(&adapter.a) + dist(&adapter.b)))
}

/// Mean importance over classes for one layer.
pub fn importance_avg(per_class: &[f64]) -> Result<f64> {
    if per_class.is_empty() {
        return Err(FunLoraError::Invalid("importance average over no classes".into()));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerImportance {
    pub layer_index: usize,
    pub per_class: Vec<(u32, f64)>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub layers: Vec<LayerImportance>,
}

impl ImportanceReport {
    pub fn averages(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.mean).collect()
    }
}

/// Importance of every (layer, class), plus per-layer mean and population
/// standard deviation over classes.
pub fn importance_report(store: &AdapterStore) -> Result<ImportanceReport> {
    if store.spec().combine != Combine::Mul {
        return Err(FunLoraError::NotMulConvention(store.spec().combine));
    }
    if store.layout() == Layout::SqrtShared {
        return Err(FunLoraError::Invalid("shared square factors have no per-layer importance".into()));
    }
    let labels: Vec<u32> = store.labels().collect();
    let layers = store.layers().to_vec();
    let rows = par::map_range(layers.len(), |li| -> Result<LayerImportance> {
        let per_class =
            labels.iter().map(|&y| Ok((y, importance(&store.adapters(y)?[li])?))).collect::<Result<Vec<_>>>()?;
        let vals: Vec<f64> = per_class.iter().map(|p| p.1).collect();
        let (mean, std) = if vals.is_empty() {
            (0.0, 0.0)
        } else {
            let m = importance_avg(&vals)?;
            (m, (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt())
        };
        Ok(LayerImportance { layer_index: layers[li].index, per_class, mean, std })
    });
    Ok(ImportanceReport { layers: rows.into_iter().collect::<Result<_>>()? })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum LayerStrategy {
    TopK { k: usize },
    IndexRange { from: usize, to: usize },
    Threshold { tau: f64 },
}

/// Picks layer positions from per-layer importances. The result is sorted
/// ascending; `TopK` prefers the lower index on ties.
pub fn select_layers(importances: &[f64], strategy: LayerStrategy) -> Result<Vec<usize>> {
    if importances.is_empty() {
        return Err(FunLoraError::Invalid("no layer importances".into()));
    }
    let mut out: Vec<usize> = match strategy {
        LayerStrategy::TopK { k } => {
            let mut idx: Vec<usize> = (0..importances.len()).collect();
            idx.sort_by(|&a, &b| importances[b].total_cmp(&importances[a]).then(a.cmp(&b)));
            idx.truncate(k);
            idx
        }
        LayerStrategy::IndexRange { from, to } => (from..=to).filter(|&i| i < importances.len()).collect(),
        LayerStrategy::Threshold { tau } => (0..importances.len()).filter(|&i| importances[i] > tau).collect(),
    };
    out.sort_unstable();
    if out.is_empty() {
        return Err(FunLoraError::EmptySelection);
    }
    Ok(out)
}

/// Parameters added per class: both factors on every layer, plus `p`
/// ponderations per layer for functional kinds and `p` more when the
/// frequencies or exponents are trained.
pub fn param_count(kind: FunctionalKind, layer_dims: &[(usize, usize)]) -> usize {
    let p = kind.p();
    let extra = p + if kind.trainable_hyper() { p } else { 0 };
    layer_dims.iter().map(|&(r, c)| r + c + extra).sum()
}
