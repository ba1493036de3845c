use std::fmt;

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::model::{Checkpoint, CHECKPOINT_VERSION};

/// A parameter that changed although it should have been frozen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.detail)
    }
}

fn compare(path: &str, before: &[f64], after: &[f64], out: &mut Vec<Violation>) {
    if before.len() != after.len() {
        out.push(Violation { path: path.into(), detail: format!("length {} became {}", before.len(), after.len()) });
        return;
    }
    for (i, (a, b)) in before.iter().zip(after).enumerate() {
        if a.to_bits() != b.to_bits() {
            out.push(Violation { path: format!("{path}[{i}]"), detail: format!("{a:e} became {b:e}") });
        }
    }
}

/// Checks that moving from `before` to `after` changed nothing except the
/// parameters of the classes introduced by `after`'s task.
pub fn forgetting_audit(before: &Checkpoint, after: &Checkpoint) -> Result<Vec<Violation>> {
    for ck in [before, after] {
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(PipelineError::FormatMismatch(format!("format version {}", ck.format_version)));
        }
    }
    let (b, a) = (&before.net, &after.net);
    if b.config() != a.config() {
        return Err(PipelineError::FormatMismatch("network configurations differ".into()));
    }
    if b.layers().len() != a.layers().len()
        || b.layers()
            .iter()
            .zip(a.layers())
            .any(|(x, y)| x.weight.shape() != y.weight.shape() || x.bias.len() != y.bias.len())
    {
        return Err(PipelineError::FormatMismatch("layer shapes differ".into()));
    }
    match (b.adapters(), a.adapters()) {
        (None, None) => {}
        (Some(x), Some(y)) if x.spec() == y.spec() && x.layout() == y.layout() && x.layers() == y.layers() => {}
        _ => return Err(PipelineError::FormatMismatch("adapter stores differ".into())),
    }

    let current = |y: &u32| after.task_classes.contains(y);
    let mut out = Vec::new();
    for (l, (x, y)) in b.layers().iter().zip(a.layers()).enumerate() {
        compare(&format!("layers[{l}].weight"), x.weight.data(), y.weight.data(), &mut out);
        compare(&format!("layers[{l}].bias"), &x.bias, &y.bias, &mut out);
    }
    for (y, e) in b.embeddings().iter().filter(|(y, _)| !current(y)) {
        match a.embeddings().get(y) {
            Some(e2) => compare(&format!("embeddings[{y}]"), e, e2, &mut out),
            None => out.push(Violation { path: format!("embeddings[{y}]"), detail: "class disappeared".into() }),
        }
    }
    for y in a.embeddings().keys().filter(|y| !current(y) && !b.embeddings().contains_key(y)) {
        out.push(Violation { path: format!("embeddings[{y}]"), detail: "appeared outside the current task".into() });
    }
    if let (Some(sb), Some(sa)) = (b.adapters(), a.adapters()) {
        for y in sb.labels().filter(|y| !current(y)) {
            let Ok(after_ads) = sa.adapters(y) else {
                out.push(Violation { path: format!("adapters[{y}]"), detail: "class disappeared".into() });
                continue;
            };
            for (slot, (x, z)) in sb.adapters(y)?.iter().zip(after_ads).enumerate() {
                let p = format!("adapters[{y}][{slot}]");
                compare(&format!("{p}.a"), &x.a, &z.a, &mut out);
                compare(&format!("{p}.b"), &x.b, &z.b, &mut out);
                compare(&format!("{p}.alphas"), &x.alphas, &z.alphas, &mut out);
                compare(&format!("{p}.hyper"), &x.hyper, &z.hyper, &mut out);
            }
        }
        for y in sa.labels().filter(|y| !current(y) && !sb.contains(*y)) {
            out.push(Violation { path: format!("adapters[{y}]"), detail: "appeared outside the current task".into() });
        }
    }
    Ok(out)
}
