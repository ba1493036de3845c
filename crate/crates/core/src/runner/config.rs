//! TOML run configuration. Every section and key is optional; missing values
//! take the defaults of [`ExperimentConfig`] and [`StreamSpec`]. Unknown keys
//! are errors.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Result, RunnerError};
use crate::flow::{Method, SolverConfig};
use crate::funlora::{Combine, FunctionalKind, Layout};
use crate::pipeline::{AdaptedLayers, Conditioning, ExperimentConfig, Family, PhaseConfig, StreamSpec};

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    stream: StreamSection,
    model: ModelSection,
    adapter: AdapterSection,
    task1: PhaseSection,
    incremental: PhaseSection,
    sampler: SamplerSection,
    classifier: ClassifierSection,
    run: RunSection,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct StreamSection {
    family: Option<Family>,
    tasks: Option<usize>,
    classes_per_task: Option<usize>,
    train_per_class: Option<usize>,
    test_per_class: Option<usize>,
    radius: Option<f64>,
    sigma: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelSection {
    hidden: Option<usize>,
    hidden_layers: Option<usize>,
    time_features: Option<usize>,
    embed_dim: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum FamilyName {
    VanillaAdd,
    VanillaMul,
    Rshift,
    Pow,
    Cos,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AdapterSection {
    conditioning: Option<Conditioning>,
    family: Option<FamilyName>,
    p: Option<usize>,
    trainable: Option<bool>,
    combine: Option<Combine>,
    calibrate: Option<bool>,
    ratio_k: Option<usize>,
    sqrt_shared: Option<bool>,
    /// Adapted layer indices; the last two hidden layers when absent.
    layers: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PhaseSection {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    warmup_steps: Option<usize>,
    ema_decay: Option<f64>,
    ema_start_epoch: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum MethodName {
    Euler,
    Rk4,
    Dopri5,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SamplerSection {
    method: Option<MethodName>,
    steps: Option<usize>,
    abs_tol: Option<f64>,
    rel_tol: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ClassifierSection {
    hidden: Option<usize>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    momentum: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunSection {
    seed: Option<u64>,
    seeds: Option<usize>,
    resample: Option<usize>,
    bounds: Option<bool>,
    snapshot_every: Option<usize>,
}

/// Fully resolved run settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub stream: StreamSpec,
    pub experiment: ExperimentConfig,
    /// First master seed; runs use `seed..seed + seeds`.
    pub seed: u64,
    pub seeds: usize,
    pub bounds: bool,
    /// Snapshot the network every this many incremental epochs (0 = never).
    pub snapshot_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            stream: StreamSpec::default(),
            experiment: ExperimentConfig::default(),
            seed: 0,
            seeds: 1,
            bounds: false,
            snapshot_every: 0,
        }
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl PhaseSection {
    fn apply(self, p: &mut PhaseConfig) {
        set(&mut p.epochs, self.epochs);
        set(&mut p.batch_size, self.batch_size);
        set(&mut p.lr, self.lr);
        set(&mut p.warmup_steps, self.warmup_steps);
        set(&mut p.ema_decay, self.ema_decay);
        set(&mut p.ema_start_epoch, self.ema_start_epoch);
    }
}

fn invalid(key: &str, msg: impl std::fmt::Display) -> RunnerError {
    RunnerError::Config(format!("{key}: {msg}"))
}

impl FileConfig {
    fn resolve(self) -> Result<RunConfig> {
        let mut rc = RunConfig::default();
        let s = self.stream;
        let st = &mut rc.stream;
        set(&mut st.family, s.family);
        set(&mut st.tasks, s.tasks);
        set(&mut st.classes_per_task, s.classes_per_task);
        set(&mut st.train_per_class, s.train_per_class);
        set(&mut st.test_per_class, s.test_per_class);
        set(&mut st.radius, s.radius);
        set(&mut st.sigma, s.sigma);

        let e = &mut rc.experiment;
        let m = self.model;
        set(&mut e.net.hidden, m.hidden);
        set(&mut e.net.hidden_layers, m.hidden_layers);
        set(&mut e.net.time_features, m.time_features);
        set(&mut e.net.embed_dim, m.embed_dim);

        let a = self.adapter;
        set(&mut e.conditioning, a.conditioning);
        let (default_p, default_trainable) = match e.adapter.kind {
            FunctionalKind::Cos { p, trainable } => (p, trainable),
            k => (k.p(), false),
        };
        let family = a.family.unwrap_or(FamilyName::Cos);
        let p = a.p.unwrap_or(default_p);
        let hyper = matches!(family, FamilyName::Pow | FamilyName::Cos);
        if a.trainable == Some(true) && !hyper {
            return Err(invalid("adapter.trainable", "only pow and cos carry trainable hyperparameters"));
        }
        if a.p.is_some() && matches!(family, FamilyName::VanillaAdd | FamilyName::VanillaMul) {
            return Err(invalid("adapter.p", "vanilla adapters have no functional terms"));
        }
        let trainable = a.trainable.unwrap_or(default_trainable && hyper);
        e.adapter.kind = match family {
            FamilyName::VanillaAdd => FunctionalKind::VanillaAdd,
            FamilyName::VanillaMul => FunctionalKind::VanillaMul,
            FamilyName::Rshift => FunctionalKind::RShift { p },
            FamilyName::Pow => FunctionalKind::Pow { p, trainable },
            FamilyName::Cos => FunctionalKind::Cos { p, trainable },
        };
        set(&mut e.adapter.combine, a.combine);
        set(&mut e.adapter.calibrate, a.calibrate);
        e.layout = match (a.ratio_k, a.sqrt_shared.unwrap_or(false)) {
            (Some(k), true) if k != 1 => return Err(invalid("adapter.sqrt_shared", "cannot be combined with ratio_k")),
            (_, true) => Layout::SqrtShared,
            (Some(0), _) => return Err(invalid("adapter.ratio_k", "must be at least 1")),
            (Some(k), false) if k > 1 => Layout::RatioK { k },
            _ => Layout::PerLayer,
        };
        if let Some(layers) = a.layers {
            e.layers = AdaptedLayers::List { layers };
        }

        self.task1.apply(&mut e.task1);
        self.incremental.apply(&mut e.incremental);

        let sm = self.sampler;
        e.solver = match sm.method.unwrap_or(MethodName::Dopri5) {
            MethodName::Euler | MethodName::Rk4 if sm.abs_tol.is_some() || sm.rel_tol.is_some() => {
                return Err(invalid("sampler", "tolerances only apply to dopri5"));
            }
            MethodName::Dopri5 if sm.steps.is_some() => {
                return Err(invalid("sampler.steps", "dopri5 chooses its own steps"))
            }
            MethodName::Euler => SolverConfig { method: Method::Euler { steps: sm.steps.unwrap_or(100) } },
            MethodName::Rk4 => SolverConfig { method: Method::Rk4 { steps: sm.steps.unwrap_or(25) } },
            MethodName::Dopri5 => {
                let (abs_tol, rel_tol) = match e.solver.method {
                    Method::Dopri5 { abs_tol, rel_tol } => (abs_tol, rel_tol),
                    _ => (1e-4, 1e-4),
                };
                SolverConfig {
                    method: Method::Dopri5 {
                        abs_tol: sm.abs_tol.unwrap_or(abs_tol),
                        rel_tol: sm.rel_tol.unwrap_or(rel_tol),
                    },
                }
            }
        };

        let c = self.classifier;
        set(&mut e.classifier.hidden, c.hidden);
        set(&mut e.classifier.epochs, c.epochs);
        set(&mut e.classifier.batch_size, c.batch_size);
        set(&mut e.classifier.lr, c.lr);
        set(&mut e.classifier.momentum, c.momentum);

        let r = self.run;
        set(&mut rc.seed, r.seed);
        set(&mut rc.seeds, r.seeds);
        set(&mut e.resample, r.resample);
        set(&mut rc.bounds, r.bounds);
        set(&mut rc.snapshot_every, r.snapshot_every);
        rc.validate()?;
        Ok(rc)
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(invalid("run.seeds", "must be at least 1"));
        }
        self.experiment.validate().map_err(|e| RunnerError::Config(e.to_string()))?;
        if self.stream.tasks < 2 {
            return Err(invalid("stream.tasks", "a stream needs at least two tasks"));
        }
        Ok(())
    }

    /// Seeds of every run, in order.
    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed + i).collect()
    }

    /// SHA-256 of the canonical JSON form. Independent of key order and of
    /// whether defaults were written out.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }
}

/// Parses a TOML document. Errors name the offending key path.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| RunnerError::Config(e.to_string()))?;
    let file: FileConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        RunnerError::Config(format!("{path}: {}", e.into_inner().message().trim()))
    })?;
    file.resolve()
}
