use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::reduce::{reduced_dims, sqrt_factorize, SqrtPlan};
use super::{init_adapter, Adapter, AdapterSpec, AdapterVars, Expand, FunLoraError, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub index: usize,
    pub rows: usize,
    pub cols: usize,
}

/// How adapter parameters map onto the adapted layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "layout", rename_all = "snake_case")]
pub enum Layout {
    /// One adapter per layer.
    PerLayer,
    /// One adapter per layer with factors shortened by `k` and the update
    /// expanded by repetition.
    RatioK { k: usize },
    /// One square adapter per class whose flattened update is sliced across
    /// layers.
    SqrtShared,
}

/// Every class's adapters over a fixed set of layers.
///
/// Classes of completed tasks are frozen: their adapters can still be read
/// but [`AdapterStore::adapters_mut`] refuses them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterStore {
    spec: AdapterSpec,
    layout: Layout,
    layers: Vec<LayerShape>,
    classes: BTreeMap<u32, Vec<Adapter>>,
    frozen: BTreeSet<u32>,
}

impl AdapterStore {
    pub fn new(spec: AdapterSpec, layout: Layout, mut layers: Vec<LayerShape>) -> Result<Self> {
        spec.kind.validate()?;
        if layers.is_empty() {
            return Err(FunLoraError::Invalid("no adapted layers".into()));
        }
        layers.sort_by_key(|l| l.index);
        if layers.windows(2).any(|w| w[0].index == w[1].index) {
            return Err(FunLoraError::Invalid("adapted layers must be distinct".into()));
        }
        if let Layout::RatioK { k: 0 } = layout {
            return Err(FunLoraError::Invalid("ratio k must be at least 1".into()));
        }
        Ok(Self { spec, layout, layers, classes: BTreeMap::new(), frozen: BTreeSet::new() })
    }

    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn layer_indices(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.index).collect()
    }

    pub fn labels(&self) -> impl Iterator<Item = u32> + '_ {
        self.classes.keys().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn contains(&self, label: u32) -> bool {
        self.classes.contains_key(&label)
    }

    pub fn is_frozen(&self, label: u32) -> bool {
        self.frozen.contains(&label)
    }

    pub fn sqrt_plan(&self) -> Result<SqrtPlan> {
        sqrt_factorize(&self.layers.iter().map(|l| (l.index, l.rows, l.cols)).collect::<Vec<_>>())
    }

    /// Creates adapters for a new class. Returns whether the effective
    /// weights start out equal to the base weights on every layer.
    pub fn add_class<R: Rng + ?Sized>(&mut self, label: u32, rng: &mut R) -> Result<bool> {
        if self.classes.contains_key(&label) {
            return Err(FunLoraError::DuplicateClass(label));
        }
        let mut identity = true;
        let mut adapters = Vec::new();
        match self.layout {
            Layout::PerLayer | Layout::RatioK { .. } => {
                let k = if let Layout::RatioK { k } = self.layout { k } else { 1 };
                for l in &self.layers {
                    let (r, c) = reduced_dims(l.rows, l.cols, k)?;
                    let mut init = init_adapter(&self.spec, r, c, label, rng)?;
                    if k > 1 {
                        init.adapter.expand = Some(Expand { k, rows: l.rows, cols: l.cols });
                    }
                    identity &= init.identity_at_init;
                    adapters.push(init.adapter);
                }
            }
            Layout::SqrtShared => {
                let d = self.sqrt_plan()?.dim;
                let init = init_adapter(&self.spec, d, d, label, rng)?;
                identity &= init.identity_at_init;
                adapters.push(init.adapter);
            }
        }
        self.classes.insert(label, adapters);
        Ok(identity)
    }

    pub fn freeze(&mut self, label: u32) -> Result<()> {
        if !self.classes.contains_key(&label) {
            return Err(FunLoraError::UnknownClass(label));
        }
        self.frozen.insert(label);
        Ok(())
    }

    pub fn adapters(&self, label: u32) -> Result<&[Adapter]> {
        self.classes.get(&label).map(Vec::as_slice).ok_or(FunLoraError::UnknownClass(label))
    }

    pub fn adapters_mut(&mut self, label: u32) -> Result<&mut [Adapter]> {
        if self.frozen.contains(&label) {
            return Err(FunLoraError::Frozen(label));
        }
        self.classes.get_mut(&label).map(Vec::as_mut_slice).ok_or(FunLoraError::UnknownClass(label))
    }

    /// Replaces a class's adapters wholesale (used to merge the results of
    /// parallel training back in).
    pub fn replace(&mut self, label: u32, adapters: Vec<Adapter>) -> Result<()> {
        let slot = self.adapters_mut(label)?;
        if slot.len() != adapters.len() {
            return Err(FunLoraError::Invalid(format!("class {label}: adapter count changed")));
        }
        slot.clone_from_slice(&adapters);
        Ok(())
    }

    /// Adapter parameters stored per class.
    pub fn params_per_class(&self) -> usize {
        self.classes
            .values()
            .next()
            .map(|ads| ads.iter().map(Adapter::trainable_len).sum())
            .unwrap_or_else(|| self.expected_params_per_class())
    }

    fn expected_params_per_class(&self) -> usize {
        let kind = self.spec.kind;
        let extra = kind.p() + if kind.trainable_hyper() { kind.p() } else { 0 };
        match self.layout {
            Layout::PerLayer => self.layers.iter().map(|l| l.rows + l.cols + extra).sum(),
            Layout::RatioK { k } => self.layers.iter().map(|l| l.rows.div_ceil(k) + l.cols.div_ceil(k) + extra).sum(),
            Layout::SqrtShared => self.sqrt_plan().map(|p| 2 * p.dim + extra).unwrap_or(0),
        }
    }

    /// Records a class's adapters on `tape`.
    pub fn register(&self, tape: &mut Tape, label: u32, trainable: bool) -> Result<Vec<AdapterVars>> {
        if trainable && self.is_frozen(label) {
            return Err(FunLoraError::Frozen(label));
        }
        self.adapters(label)?.iter().map(|a| a.register(tape, trainable)).collect()
    }

    /// Update matrices on `tape`, one per adapted layer in ascending order.
    pub fn layer_matrices_on_tape(
        &self,
        tape: &mut Tape,
        label: u32,
        vars: &[AdapterVars],
    ) -> Result<Vec<(usize, Var)>> {
        let adapters = self.adapters(label)?;
        match self.layout {
            Layout::PerLayer | Layout::RatioK { .. } => self
                .layers
                .iter()
                .zip(adapters.iter().zip(vars))
                .map(|(l, (a, v))| Ok((l.index, a.functional_on_tape(tape, v)?)))
                .collect(),
            Layout::SqrtShared => {
                let f = adapters[0].functional_on_tape(tape, &vars[0])?;
                let plan = self.sqrt_plan()?;
                plan.segments.iter().map(|s| Ok((s.layer, tape.slice_flat(f, s.start, &[s.rows, s.cols])?))).collect()
            }
        }
    }

    /// Update matrices as plain tensors.
    pub fn layer_matrices(&self, label: u32) -> Result<Vec<(usize, Tensor)>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, label, false)?;
        let mats = self.layer_matrices_on_tape(&mut tape, label, &vars)?;
        mats.into_iter().map(|(l, v)| Ok((l, tape.value(v)?.clone()))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funlora::{Combine, FunctionalKind};
    use crate::rng::{rng_for, Stream};

    fn store(layout: Layout) -> AdapterStore {
        let spec =
            AdapterSpec { kind: FunctionalKind::Cos { p: 3, trainable: true }, combine: Combine::Mul, calibrate: true };
        let layers = vec![LayerShape { index: 3, rows: 4, cols: 5 }, LayerShape { index: 1, rows: 6, cols: 4 }];
        AdapterStore::new(spec, layout, layers).unwrap()
    }

    #[test]
    fn frozen_classes_refuse_writes() {
        let mut s = store(Layout::PerLayer);
        let mut rng = rng_for(0, Stream::Init, 0);
        assert!(s.add_class(2, &mut rng).unwrap());
        assert!(s.add_class(2, &mut rng).is_err());
        assert!(s.adapters_mut(2).is_ok());
        s.freeze(2).unwrap();
        assert_eq!(s.adapters_mut(2).unwrap_err(), FunLoraError::Frozen(2));
        assert!(s.adapters(2).is_ok());
        let mut tape = Tape::new();
        assert!(s.register(&mut tape, 2, true).is_err());
        assert!(s.register(&mut tape, 2, false).is_ok());
    }

    #[test]
    fn layouts_produce_layer_shaped_updates() {
        for layout in [Layout::PerLayer, Layout::RatioK { k: 2 }, Layout::SqrtShared] {
            let mut s = store(layout);
            let mut rng = rng_for(0, Stream::Init, 0);
            s.add_class(0, &mut rng).unwrap();
            let mats = s.layer_matrices(0).unwrap();
            assert_eq!(mats.iter().map(|m| m.0).collect::<Vec<_>>(), vec![1, 3]);
            assert_eq!(mats[0].1.shape(), &[6, 4]);
            assert_eq!(mats[1].1.shape(), &[4, 5]);
            for (_, m) in &mats {
                assert!(m.data().iter().all(|&x| (x - 1.0).abs() < 1e-12), "{layout:?}");
            }
            assert_eq!(s.params_per_class(), s.expected_params_per_class());
        }
    }

    #[test]
    fn param_counts_by_layout() {
        // per layer: (6+4+6) + (4+5+6); ratio 2: (3+2+6) + (2+3+6); shared: n = 44 -> dim 7
        assert_eq!(store(Layout::PerLayer).params_per_class(), 31);
        assert_eq!(store(Layout::RatioK { k: 2 }).params_per_class(), 22);
        assert_eq!(store(Layout::SqrtShared).params_per_class(), 14 + 6);
    }
}
