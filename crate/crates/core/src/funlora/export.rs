//! CSV renderings of the diagnostics.

use std::fmt::Write;

use super::{AdapterStore, ImportanceReport, RankEntry, Result};

pub const RANK_HEADER: &str = "layer_index,class_label,rank";
pub const IMPORTANCE_HEADER: &str = "layer_index,class_label,importance";
pub const PONDERATION_HEADER: &str = "layer_index,class_label,i,alpha_i,omega_i";

pub fn rank_csv(entries: &[RankEntry]) -> String {
    let mut s = format!("{RANK_HEADER}\n");
    for e in entries {
        let _ = writeln!(s, "{},{},{}", e.layer_index, e.class_label, e.rank);
    }
    s
}

pub fn importance_csv(report: &ImportanceReport) -> String {
    let mut s = format!("{IMPORTANCE_HEADER}\n");
    for l in &report.layers {
        for (y, v) in &l.per_class {
            let _ = writeln!(s, "{},{y},{v}", l.layer_index);
        }
    }
    s
}

/// Ponderations and frequencies (exponents for the power family) per term.
/// The hyper column is empty for kinds without one. A shared square adapter
/// is reported once under the first adapted layer.
pub fn ponderation_csv(store: &AdapterStore) -> Result<String> {
    let mut s = format!("{PONDERATION_HEADER}\n");
    let layers = store.layer_indices();
    for y in store.labels() {
        for (adapter, layer) in store.adapters(y)?.iter().zip(&layers) {
            for (i, alpha) in adapter.alphas.iter().enumerate() {
                let hyper = adapter.hyper.get(i).map(|h| h.to_string()).unwrap_or_default();
                let _ = writeln!(s, "{layer},{y},{},{alpha},{hyper}", i + 1);
            }
        }
    }
    Ok(s)
}
