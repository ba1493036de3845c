use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dense::{affine, silu, Dense};
use super::{ModelError, Result};
use crate::funlora::{combine, combine_on_tape, AdapterSpec, AdapterStore, LayerShape, Layout};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub data_dim: usize,
    pub hidden: usize,
    /// Dense layers producing hidden activations; one output layer follows.
    pub hidden_layers: usize,
    /// Even number of sinusoidal features of t.
    pub time_features: usize,
    pub embed_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { data_dim: 2, hidden: 64, hidden_layers: 4, time_features: 8, embed_dim: 8 }
    }
}

impl NetConfig {
    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_features + self.embed_dim
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_layers + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.hidden == 0 || self.hidden_layers == 0 || self.embed_dim == 0 {
            return Err(ModelError::Invalid("network dimensions must be positive".into()));
        }
        if self.time_features == 0 || !self.time_features.is_multiple_of(2) {
            return Err(ModelError::Invalid("time_features must be positive and even".into()));
        }
        Ok(())
    }
}

/// `sin(2^k t), cos(2^k t)` for `k = 0..n/2`.
pub fn time_features(t: f64, n: usize) -> Vec<f64> {
    (0..n / 2)
        .flat_map(|k| {
            let w = (1u64 << k) as f64;
            [(w * t).sin(), (w * t).cos()]
        })
        .collect()
}

/// What may change during a training phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Every base weight and bias plus the embeddings of open classes.
    Base,
    /// Only the embedding of one class.
    Embedding(u32),
    /// Only the adapter parameters of one class.
    Adapter(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamRef {
    Weight(usize),
    Bias(usize),
    Embedding(u32),
    /// Field `field` (A, B, α, hyper in that order) of adapter `slot`.
    Adapter {
        label: u32,
        slot: usize,
        field: usize,
    },
}

/// How a class is conditioned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    Embedding,
    Adapter(u32),
}

/// Dense network `v(t, x, y)`.
///
/// The input is `[x | time features | class embedding]`. Classes with an
/// embedding use the base weights everywhere; classes with adapters get a
/// zero embedding and modulated weights on the adapted layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorFieldNet {
    config: NetConfig,
    layers: Vec<Dense>,
    embeddings: BTreeMap<u32, Vec<f64>>,
    adapters: Option<AdapterStore>,
    base_frozen: bool,
    completed: BTreeSet<u32>,
}

impl VectorFieldNet {
    pub fn new<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut dims = vec![config.input_dim()];
        dims.extend(std::iter::repeat_n(config.hidden, config.hidden_layers));
        dims.push(config.data_dim);
        let layers = dims.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect();
        Ok(Self {
            config,
            layers,
            embeddings: BTreeMap::new(),
            adapters: None,
            base_frozen: false,
            completed: BTreeSet::new(),
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn embeddings(&self) -> &BTreeMap<u32, Vec<f64>> {
        &self.embeddings
    }

    pub fn adapters(&self) -> Option<&AdapterStore> {
        self.adapters.as_ref()
    }

    pub fn base_frozen(&self) -> bool {
        self.base_frozen
    }

    pub fn completed(&self) -> &BTreeSet<u32> {
        &self.completed
    }

    pub fn base_param_count(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    /// Test hook: direct access to the base layers.
    #[doc(hidden)]
    pub fn layers_mut_unchecked(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    /// Creates an empty adapter store over `layer_indices`.
    pub fn attach_adapters(&mut self, spec: AdapterSpec, layout: Layout, layer_indices: &[usize]) -> Result<()> {
        if self.adapters.is_some() {
            return Err(ModelError::Invalid("adapters already attached".into()));
        }
        let shapes = layer_indices
            .iter()
            .map(|&i| {
                let d = self.layers.get(i).ok_or_else(|| ModelError::Invalid(format!("no layer {i} to adapt")))?;
                Ok(LayerShape { index: i, rows: d.fan_out(), cols: d.fan_in() })
            })
            .collect::<Result<Vec<_>>>()?;
        self.adapters = Some(AdapterStore::new(spec, layout, shapes)?);
        Ok(())
    }

    fn known(&self, label: u32) -> bool {
        self.embeddings.contains_key(&label) || self.adapters.as_ref().is_some_and(|s| s.contains(label))
    }

    /// Registers a class conditioned through an embedding drawn from `N(0, 1)`.
    pub fn add_embedding_class<R: Rng + ?Sized>(&mut self, label: u32, rng: &mut R) -> Result<()> {
        if self.known(label) {
            return Err(ModelError::Invalid(format!("class {label} already registered")));
        }
        let e = (0..self.config.embed_dim).map(|_| StandardNormal.sample(rng)).collect();
        self.embeddings.insert(label, e);
        Ok(())
    }

    /// Registers a class conditioned through adapters. Returns whether the
    /// class starts with effective weights equal to the base weights.
    pub fn add_adapter_class<R: Rng + ?Sized>(&mut self, label: u32, rng: &mut R) -> Result<bool> {
        if self.known(label) {
            return Err(ModelError::Invalid(format!("class {label} already registered")));
        }
        let store = self.adapters.as_mut().ok_or_else(|| ModelError::Invalid("no adapter store attached".into()))?;
        Ok(store.add_class(label, rng)?)
    }

    pub fn freeze_base(&mut self) {
        self.base_frozen = true;
    }

    /// Marks a class as finished: its embedding or adapters become read-only.
    pub fn complete_class(&mut self, label: u32) -> Result<()> {
        if !self.known(label) {
            return Err(ModelError::UnknownLabel(label));
        }
        if let Some(s) = self.adapters.as_mut().filter(|s| s.contains(label)) {
            s.freeze(label)?;
        }
        self.completed.insert(label);
        Ok(())
    }

    pub fn route(&self, label: u32) -> Result<Route> {
        if self.embeddings.contains_key(&label) {
            Ok(Route::Embedding)
        } else if self.adapters.as_ref().is_some_and(|s| s.contains(label)) {
            Ok(Route::Adapter(label))
        } else {
            Err(ModelError::UnknownLabel(label))
        }
    }

    /// Parameters a phase may update, in a fixed order.
    pub fn trainable_params(&self, phase: Phase) -> Result<Vec<ParamRef>> {
        match phase {
            Phase::Base => {
                if self.base_frozen {
                    return Err(ModelError::Frozen("base weights".into()));
                }
                let mut refs: Vec<ParamRef> =
                    (0..self.layers.len()).flat_map(|l| [ParamRef::Weight(l), ParamRef::Bias(l)]).collect();
                refs.extend(
                    self.embeddings.keys().filter(|y| !self.completed.contains(y)).map(|&y| ParamRef::Embedding(y)),
                );
                Ok(refs)
            }
            Phase::Embedding(y) => {
                if !self.embeddings.contains_key(&y) {
                    return Err(ModelError::UnknownLabel(y));
                }
                if self.completed.contains(&y) {
                    return Err(ModelError::Frozen(format!("embedding of class {y}")));
                }
                Ok(vec![ParamRef::Embedding(y)])
            }
            Phase::Adapter(y) => {
                let store = self.adapters.as_ref().ok_or(ModelError::UnknownLabel(y))?;
                if store.is_frozen(y) || self.completed.contains(&y) {
                    return Err(ModelError::Frozen(format!("adapters of class {y}")));
                }
                let ads = store.adapters(y)?;
                let mut refs = Vec::new();
                for (slot, a) in ads.iter().enumerate() {
                    let fields = 2 + usize::from(a.kind.is_functional()) + usize::from(a.kind.trainable_hyper());
                    refs.extend((0..fields).map(|field| ParamRef::Adapter { label: y, slot, field }));
                }
                Ok(refs)
            }
        }
    }

    /// Number of scalars a phase may update.
    pub fn trainable_count(&self, phase: Phase) -> Result<usize> {
        Ok(self.phase_slices(phase)?.iter().map(|s| s.len()).sum())
    }

    fn phase_slices(&self, phase: Phase) -> Result<Vec<&[f64]>> {
        let refs = self.trainable_params(phase)?;
        refs.iter().map(|r| self.param(*r)).collect()
    }

    pub fn param(&self, r: ParamRef) -> Result<&[f64]> {
        Ok(match r {
            ParamRef::Weight(l) => self.layers[l].weight.data(),
            ParamRef::Bias(l) => &self.layers[l].bias,
            ParamRef::Embedding(y) => self.embeddings.get(&y).ok_or(ModelError::UnknownLabel(y))?,
            ParamRef::Adapter { label, slot, field } => {
                let store = self.adapters.as_ref().ok_or(ModelError::UnknownLabel(label))?;
                let a = &store.adapters(label)?[slot];
                match field {
                    0 => &a.a,
                    1 => &a.b,
                    2 if a.kind.is_functional() => &a.alphas,
                    _ => &a.hyper,
                }
            }
        })
    }

    /// Mutable views of a phase's parameters, in [`Self::trainable_params`] order.
    pub fn phase_slices_mut(&mut self, phase: Phase) -> Result<Vec<&mut [f64]>> {
        self.trainable_params(phase)?;
        match phase {
            Phase::Base => {
                let completed = &self.completed;
                let mut out: Vec<&mut [f64]> = Vec::new();
                for d in self.layers.iter_mut() {
                    out.push(d.weight.data_mut());
                    out.push(&mut d.bias);
                }
                out.extend(
                    self.embeddings.iter_mut().filter(|(y, _)| !completed.contains(y)).map(|(_, e)| e.as_mut_slice()),
                );
                Ok(out)
            }
            Phase::Embedding(y) => Ok(vec![self.embeddings.get_mut(&y).ok_or(ModelError::UnknownLabel(y))?]),
            Phase::Adapter(y) => {
                let store = self.adapters.as_mut().ok_or(ModelError::UnknownLabel(y))?;
                Ok(store
                    .adapters_mut(y)?
                    .iter_mut()
                    .flat_map(|a| a.trainable_mut())
                    .map(|v| v.as_mut_slice())
                    .collect())
            }
        }
    }

    fn batch_route(&self, labels: &[u32]) -> Result<Route> {
        let first = *labels.first().ok_or_else(|| ModelError::Invalid("empty batch".into()))?;
        let route = self.route(first)?;
        for &y in &labels[1..] {
            let r = self.route(y)?;
            let same = match (route, r) {
                (Route::Embedding, Route::Embedding) => true,
                (Route::Adapter(a), Route::Adapter(b)) => a == b,
                _ => false,
            };
            if !same {
                return Err(ModelError::MixedRoutes);
            }
        }
        Ok(route)
    }

    fn input_features(&self, t: &[f64]) -> Vec<f64> {
        t.iter().flat_map(|&tv| time_features(tv, self.config.time_features)).collect()
    }

    /// Records the forward pass of a batch on `tape`.
    ///
    /// `x` is `batch × data_dim`, `t` and `labels` have one entry per row.
    /// A batch may mix embedding-conditioned classes but adapter-conditioned
    /// batches must hold a single class. With `phase` set, the phase's
    /// parameters are recorded as trainable and their handles returned in
    /// [`Self::trainable_params`] order.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        t: &[f64],
        x: Var,
        labels: &[u32],
        phase: Option<Phase>,
    ) -> Result<(Var, Vec<Var>)> {
        let n = labels.len();
        let xs = tape.value(x)?;
        if xs.rank() != 2 || xs.rows() != n || xs.cols() != self.config.data_dim || t.len() != n {
            return Err(ModelError::Invalid(format!(
                "batch of {n} labels and {} times against x of shape {:?}",
                t.len(),
                xs.shape()
            )));
        }
        let route = self.batch_route(labels)?;
        let refs = match phase {
            Some(p) => self.trainable_params(p)?,
            None => Vec::new(),
        };

        // Adapter phases register their fields as a block.
        let mut adapter_vars = None;
        let mut handles: BTreeMap<ParamRef, Var> = BTreeMap::new();
        let mut ordered = Vec::with_capacity(refs.len());
        if let Some(Phase::Adapter(y)) = phase {
            let store = self.adapters.as_ref().ok_or(ModelError::UnknownLabel(y))?;
            let vars = store.register(tape, y, true)?;
            ordered = vars.iter().flat_map(|v| v.trainable()).collect();
            adapter_vars = Some((y, vars));
        } else {
            for r in &refs {
                let value = match *r {
                    ParamRef::Weight(l) => self.layers[l].weight.clone(),
                    ParamRef::Bias(l) => Tensor::matrix(1, self.layers[l].bias.len(), self.layers[l].bias.clone())?,
                    ParamRef::Embedding(y) => Tensor::matrix(1, self.config.embed_dim, self.embeddings[&y].clone())?,
                    ParamRef::Adapter { .. } => unreachable!("adapter refs only come from adapter phases"),
                };
                let v = tape.param(value);
                handles.insert(*r, v);
                ordered.push(v);
            }
        }

        let tf = tape.constant(Tensor::matrix(n, self.config.time_features, self.input_features(t))?);
        let emb = match route {
            Route::Embedding => {
                let mut distinct: Vec<u32> = labels.to_vec();
                distinct.sort_unstable();
                distinct.dedup();
                let rows = distinct
                    .iter()
                    .map(|&y| match handles.get(&ParamRef::Embedding(y)) {
                        Some(&v) => Ok(v),
                        None => {
                            Ok(tape.constant(Tensor::matrix(1, self.config.embed_dim, self.embeddings[&y].clone())?))
                        }
                    })
                    .collect::<Result<Vec<Var>>>()?;
                let table = tape.concat(&rows, 0)?;
                let mut onehot = vec![0.0; n * distinct.len()];
                for (r, y) in labels.iter().enumerate() {
                    let j = distinct.binary_search(y).expect("label in distinct set");
                    onehot[r * distinct.len() + j] = 1.0;
                }
                let oh = tape.constant(Tensor::matrix(n, distinct.len(), onehot)?);
                tape.matmul(oh, table)?
            }
            Route::Adapter(_) => tape.constant(Tensor::zeros(&[n, self.config.embed_dim])),
        };
        let mut h = tape.concat(&[x, tf, emb], 1)?;

        let updates: BTreeMap<usize, Var> = match route {
            Route::Adapter(y) => {
                let store = self.adapters.as_ref().expect("adapter route implies a store");
                let vars = match &adapter_vars {
                    Some((py, vars)) if *py == y => vars.clone(),
                    _ => store.register(tape, y, false)?,
                };
                store.layer_matrices_on_tape(tape, y, &vars)?.into_iter().collect()
            }
            Route::Embedding => BTreeMap::new(),
        };
        let combine_op = self.adapters.as_ref().map(|s| s.spec().combine);
        let last = self.layers.len() - 1;
        for (l, d) in self.layers.iter().enumerate() {
            let w = match handles.get(&ParamRef::Weight(l)) {
                Some(&v) => v,
                None => tape.constant(d.weight.clone()),
            };
            let b = match handles.get(&ParamRef::Bias(l)) {
                Some(&v) => v,
                None => tape.constant(Tensor::matrix(1, d.bias.len(), d.bias.clone())?),
            };
            let w = match (updates.get(&l), combine_op) {
                (Some(&f), Some(op)) => combine_on_tape(tape, w, f, op)?,
                _ => w,
            };
            h = tape.matmul_nt(h, w)?;
            h = tape.add_row(h, b)?;
            if l != last {
                h = tape.silu(h)?;
            }
        }
        Ok((h, ordered))
    }

    /// Frozen view of the network for one class, with the effective weights
    /// precomputed.
    pub fn class_field(&self, label: u32) -> Result<ClassField> {
        let route = self.route(label)?;
        let mut weights: Vec<Tensor> = self.layers.iter().map(|d| d.weight.clone()).collect();
        let embedding = match route {
            Route::Embedding => self.embeddings[&label].clone(),
            Route::Adapter(y) => {
                let store = self.adapters.as_ref().expect("adapter route implies a store");
                for (l, f) in store.layer_matrices(y)? {
                    weights[l] = combine(&self.layers[l].weight, &f, store.spec().combine)?;
                }
                vec![0.0; self.config.embed_dim]
            }
        };
        Ok(ClassField {
            config: self.config.clone(),
            weights,
            biases: self.layers.iter().map(|d| d.bias.clone()).collect(),
            embedding,
        })
    }

    /// Field of the unadapted network with a zero embedding, which is what an
    /// adapter class sees before any adapter update.
    pub fn base_field(&self) -> ClassField {
        ClassField {
            config: self.config.clone(),
            weights: self.layers.iter().map(|d| d.weight.clone()).collect(),
            biases: self.layers.iter().map(|d| d.bias.clone()).collect(),
            embedding: vec![0.0; self.config.embed_dim],
        }
    }
}

/// Velocity field of a single class with fixed weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassField {
    config: NetConfig,
    weights: Vec<Tensor>,
    biases: Vec<Vec<f64>>,
    embedding: Vec<f64>,
}

impl ClassField {
    pub fn effective_weights(&self) -> &[Tensor] {
        &self.weights
    }

    /// Velocities for `x` (row-major, `data_dim` columns), all at time `t`.
    pub fn velocity(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let d = self.config.data_dim;
        let n = x.len() / d;
        let tf = time_features(t, self.config.time_features);
        let width = self.config.input_dim();
        let mut h = Vec::with_capacity(n * width);
        for r in 0..n {
            h.extend_from_slice(&x[r * d..(r + 1) * d]);
            h.extend_from_slice(&tf);
            h.extend_from_slice(&self.embedding);
        }
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = affine(&h, n, w, b);
            if l != last {
                h.iter_mut().for_each(|v| *v = silu(*v));
            }
        }
        h
    }
}
