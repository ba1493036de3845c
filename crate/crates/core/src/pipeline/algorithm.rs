use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{MetricsRecord, TaskMetrics, SCHEMA_VERSION};
use super::sample::synthesize;
use super::stream::TaskStream;
use super::train::{train_phase, PhaseConfig, PhaseStats, PhaseTrainer};
use super::{PipelineError, Result};
use crate::dataset::Dataset;
use crate::flow::{Method, SolverConfig};
use crate::funlora::{AdapterSpec, Combine, FunctionalKind, Layout};
use crate::model::{classifier_eval, classifier_train, Checkpoint, ClassifierConfig, NetConfig, Phase, VectorFieldNet};
use crate::par;
use crate::rng::{derive, rng_for, Stream};

/// How classes after the first task are conditioned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Each new class trains its own adapters on the frozen base.
    Adapters,
    /// Each new class trains only a fresh embedding (no adapters).
    Embeddings,
}

/// Which base layers carry adapters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "select", rename_all = "snake_case")]
pub enum AdaptedLayers {
    All,
    /// The last `count` hidden layers, just before the output layer.
    LastHidden {
        count: usize,
    },
    /// Inclusive on both ends.
    IndexRange {
        from: usize,
        to: usize,
    },
    List {
        layers: Vec<usize>,
    },
}

impl AdaptedLayers {
    pub fn resolve(&self, num_layers: usize) -> Result<Vec<usize>> {
        let out: Vec<usize> = match self {
            Self::All => (0..num_layers).collect(),
            Self::LastHidden { count } => {
                let hidden = num_layers.saturating_sub(1);
                if *count > hidden {
                    return Err(PipelineError::Invalid(format!("{count} adapted layers but only {hidden} hidden")));
                }
                (hidden - count..hidden).collect()
            }
            Self::IndexRange { from, to } => (*from..=*to).collect(),
            Self::List { layers } => {
                let mut l = layers.clone();
                l.sort_unstable();
                l.dedup();
                l
            }
        };
        if out.is_empty() || out.iter().any(|&i| i >= num_layers) {
            return Err(PipelineError::Invalid(format!(
                "adapted layers {out:?} do not fit a {num_layers}-layer network"
            )));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub net: NetConfig,
    pub conditioning: Conditioning,
    pub adapter: AdapterSpec,
    pub layout: Layout,
    pub layers: AdaptedLayers,
    /// Unconstrained training of the first task.
    pub task1: PhaseConfig,
    /// Per-class training of every later task.
    pub incremental: PhaseConfig,
    pub solver: SolverConfig,
    /// Synthetic points per class, as a multiple of the real per-class count.
    pub resample: usize,
    pub classifier: ClassifierConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            conditioning: Conditioning::Adapters,
            adapter: AdapterSpec {
                kind: FunctionalKind::Cos { p: 10, trainable: true },
                combine: Combine::Mul,
                calibrate: true,
            },
            layout: Layout::PerLayer,
            layers: AdaptedLayers::LastHidden { count: 2 },
            // sized for 1000 points per task (8 steps per epoch)
            task1: PhaseConfig {
                epochs: 100,
                batch_size: 128,
                lr: 2e-3,
                warmup_steps: 100,
                ema_decay: 0.9995,
                ema_start_epoch: 40,
            },
            incremental: PhaseConfig {
                epochs: 100,
                batch_size: 128,
                lr: 1e-2,
                warmup_steps: 0,
                ema_decay: 0.995,
                ema_start_epoch: 33,
            },
            solver: SolverConfig { method: Method::Dopri5 { abs_tol: 1e-4, rel_tol: 1e-4 } },
            resample: 1,
            classifier: ClassifierConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.adapter.kind.validate()?;
        self.task1.validate()?;
        self.incremental.validate()?;
        self.solver.validate()?;
        self.layers.resolve(self.net.num_layers())?;
        if self.resample == 0 {
            return Err(PipelineError::Invalid("resample factor must be at least 1".into()));
        }
        if self.classifier.batch_size == 0 || self.classifier.hidden == 0 {
            return Err(PipelineError::Invalid("classifier needs a positive width and batch size".into()));
        }
        Ok(())
    }

    pub fn method_label(&self) -> String {
        match self.conditioning {
            Conditioning::Embeddings => "vanilla_conditioning".into(),
            Conditioning::Adapters => {
                let combine = match self.adapter.combine {
                    Combine::Add => "add",
                    Combine::Mul => "mul",
                    Combine::MulAdd => "muladd",
                };
                let layout = match self.layout {
                    Layout::PerLayer => String::new(),
                    Layout::RatioK { k } => format!("_ratio{k}"),
                    Layout::SqrtShared => "_sqrt".into(),
                };
                format!("funlora_{}_{combine}{layout}", self.adapter.kind.label())
            }
        }
    }
}

/// Classifier outcome after one task.
#[derive(Clone, Debug, PartialEq)]
pub struct StageResult {
    pub a_t: f64,
    pub nfe: usize,
    pub synthetic_per_class: usize,
    pub sample_seconds: f64,
    pub classifier_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: MetricsRecord,
    /// One snapshot per task, in order.
    pub checkpoints: Vec<Checkpoint>,
}

/// Relabels `data` to positions in `labels` so the classifier head is dense.
pub(crate) fn to_head(data: &Dataset, labels: &[u32]) -> Result<Dataset> {
    let mut out = data.clone();
    for y in &mut out.labels {
        *y = labels
            .iter()
            .position(|l| l == y)
            .ok_or_else(|| PipelineError::Invalid(format!("label {y} outside the head")))? as u32;
    }
    Ok(out)
}

pub(crate) fn fit_and_score(
    train: &Dataset,
    test: &Dataset,
    labels: &[u32],
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<f64> {
    let clf = classifier_train(&to_head(train, labels)?, labels.len(), cfg, seed)?;
    Ok(classifier_eval(&clf, &to_head(test, labels)?)?)
}

/// Classifier step after task `t` (1-based): real data for the first task,
/// otherwise a synthetic set of every class seen so far.
pub fn evaluate_stage(
    net: &VectorFieldNet,
    stream: &TaskStream,
    t: usize,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<StageResult> {
    if t == 0 || t > stream.len() {
        return Err(PipelineError::Invalid(format!("stage {t} outside a {}-task stream", stream.len())));
    }
    let labels = stream.labels_upto(t);
    let per_class = cfg.resample * stream.train_per_class();
    let clock = Instant::now();
    let (train, nfe, synthetic_per_class) = if t == 1 {
        (stream.tasks[0].train.clone(), 0, 0)
    } else {
        let s = synthesize(net, &labels, per_class, &cfg.solver, seed, t)?;
        (s.data, s.nfe, per_class)
    };
    let sample_seconds = clock.elapsed().as_secs_f64();
    let clock = Instant::now();
    let a_t = fit_and_score(
        &train,
        &stream.test_upto(t),
        &labels,
        &cfg.classifier,
        derive(seed, Stream::Classifier, t as u64),
    )?;
    Ok(StageResult { a_t, nfe, synthetic_per_class, sample_seconds, classifier_seconds: clock.elapsed().as_secs_f64() })
}

fn copy_phase(dst: &mut VectorFieldNet, src: &VectorFieldNet, phase: Phase) -> Result<()> {
    let refs = src.trainable_params(phase)?;
    let values: Vec<Vec<f64>> =
        refs.iter().map(|r| src.param(*r).map(<[f64]>::to_vec)).collect::<std::result::Result<_, _>>()?;
    for (slot, v) in dst.phase_slices_mut(phase)?.into_iter().zip(values) {
        slot.copy_from_slice(&v);
    }
    Ok(())
}

/// Called with `(task, epoch, net)` while an incremental task trains.
pub type Observer<'a> = &'a mut dyn FnMut(usize, usize, &VectorFieldNet) -> Result<()>;

/// Trains every class of an incremental task independently on its own copy
/// of the network, then merges the class parameters back. With an observer,
/// training pauses every `every` epochs to merge and report live weights.
fn train_new_classes(
    net: &mut VectorFieldNet,
    t: usize,
    labels: &[u32],
    data: &Dataset,
    cfg: &ExperimentConfig,
    seed: u64,
    mut observer: Option<(usize, Observer<'_>)>,
) -> Result<Vec<PhaseStats>> {
    let mut work = labels
        .iter()
        .map(|&y| {
            let class_data = data.filter(|l| l == y);
            let trainer = PhaseTrainer::new(
                net,
                class_phase(cfg.conditioning, y),
                &class_data,
                &cfg.incremental,
                rng_for(seed, Stream::Path, 1 + y as u64),
            )?;
            Ok((net.clone(), trainer, class_data, Ok(())))
        })
        .collect::<Result<Vec<_>>>()?;
    let total = cfg.incremental.epochs;
    let chunk = observer.as_ref().map_or(total, |(every, _)| (*every).max(1));
    loop {
        par::for_each_mut(&mut work, |(local, trainer, d, status)| {
            if status.is_ok() {
                *status = trainer.run(local, d, chunk);
            }
        });
        for (&y, (local, _, _, status)) in labels.iter().zip(&mut work) {
            std::mem::replace(status, Ok(()))?;
            copy_phase(net, local, class_phase(cfg.conditioning, y))?;
        }
        let done = work.first().map_or(total, |w| w.1.epochs_done());
        if done >= total {
            break;
        }
        if let Some((_, f)) = observer.as_mut() {
            f(t, done, net)?;
        }
    }
    let mut all = Vec::with_capacity(labels.len());
    for (&y, (mut local, trainer, _, _)) in labels.iter().zip(work) {
        all.push(trainer.finish(&mut local)?);
        copy_phase(net, &local, class_phase(cfg.conditioning, y))?;
    }
    if let Some((_, f)) = observer.as_mut() {
        f(t, total, net)?;
    }
    Ok(all)
}

fn class_phase(c: Conditioning, y: u32) -> Phase {
    match c {
        Conditioning::Adapters => Phase::Adapter(y),
        Conditioning::Embeddings => Phase::Embedding(y),
    }
}

/// Runs the class-incremental pipeline over `stream`.
pub fn run_algorithm1(stream: &TaskStream, cfg: &ExperimentConfig, seed: u64) -> Result<RunOutput> {
    run_algorithm1_observed(stream, cfg, seed, None)
}

/// [`run_algorithm1`] reporting the merged network every `every` epochs of
/// each incremental task, and once more after its final averaged weights.
/// Results do not depend on the observer.
pub fn run_algorithm1_observed(
    stream: &TaskStream,
    cfg: &ExperimentConfig,
    seed: u64,
    mut observer: Option<(usize, Observer<'_>)>,
) -> Result<RunOutput> {
    cfg.validate()?;
    if stream.tasks.iter().flat_map(|t| [&t.train, &t.test]).any(|d| d.dim != cfg.net.data_dim) {
        return Err(PipelineError::Invalid("stream dimension differs from the network's".into()));
    }
    let start = Instant::now();
    let mut init = rng_for(seed, Stream::Init, 0);
    let mut net = VectorFieldNet::new(cfg.net.clone(), &mut init)?;
    if cfg.conditioning == Conditioning::Adapters {
        let layers = cfg.layers.resolve(net.layers().len())?;
        net.attach_adapters(cfg.adapter, cfg.layout, &layers)?;
    }
    let mut tasks = Vec::with_capacity(stream.len());
    let mut checkpoints = Vec::with_capacity(stream.len());
    for (i, task) in stream.tasks.iter().enumerate() {
        let t = i + 1;
        let clock = Instant::now();
        let (seen, new_params) = if t == 1 {
            for &y in &task.labels {
                net.add_embedding_class(y, &mut init)?;
            }
            let stats = train_phase(&mut net, Phase::Base, &task.train, &cfg.task1, rng_for(seed, Stream::Path, 0))?;
            net.freeze_base();
            (stats.samples_seen, cfg.net.embed_dim)
        } else {
            for &y in &task.labels {
                match cfg.conditioning {
                    Conditioning::Adapters => {
                        net.add_adapter_class(y, &mut init)?;
                    }
                    Conditioning::Embeddings => net.add_embedding_class(y, &mut init)?,
                }
            }
            let per_class = net.trainable_count(class_phase(cfg.conditioning, task.labels[0]))?;
            let obs = observer.as_mut().map(|(every, f)| (*every, &mut **f as Observer<'_>));
            let stats = train_new_classes(&mut net, t, &task.labels, &task.train, cfg, seed, obs)?;
            (stats.iter().map(|s| s.samples_seen).sum(), per_class)
        };
        for &y in &task.labels {
            net.complete_class(y)?;
        }
        let train_seconds = clock.elapsed().as_secs_f64();
        checkpoints.push(Checkpoint::new(t, task.labels.clone(), net.clone()));
        let stage = evaluate_stage(&net, stream, t, cfg, seed)?;
        tasks.push(TaskMetrics {
            task_index: t,
            classes: task.labels.clone(),
            a_t: stage.a_t,
            aa_t: 0.0,
            generative_samples_seen: seen,
            trainable_params_per_class: new_params,
            nfe: stage.nfe,
            synthetic_per_class: stage.synthetic_per_class,
            train_seconds,
            sample_seconds: stage.sample_seconds,
            classifier_seconds: stage.classifier_seconds,
        });
    }
    let ppc = match (cfg.conditioning, net.adapters()) {
        (Conditioning::Adapters, Some(store)) => store.params_per_class(),
        _ => cfg.net.embed_dim,
    };
    let mut metrics = MetricsRecord {
        schema_version: SCHEMA_VERSION,
        method: cfg.method_label(),
        seed,
        tasks,
        aa: 0.0,
        aia: 0.0,
        la: 0.0,
        ppc,
        wall_seconds: 0.0,
    };
    metrics.recompute()?;
    metrics.wall_seconds = start.elapsed().as_secs_f64();
    Ok(RunOutput { metrics, checkpoints })
}
