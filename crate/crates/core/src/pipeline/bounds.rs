use serde::{Deserialize, Serialize};

use super::algorithm::{fit_and_score, run_algorithm1, Conditioning, ExperimentConfig};
use super::metrics::{aa, aia, running_aa};
use super::sample::synthesize;
use super::stream::TaskStream;
use super::train::train_phase;
use super::Result;
use crate::model::{Phase, VectorFieldNet};
use crate::rng::{derive, rng_for, Stream};

/// Per-task scores of one reference run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTrack {
    pub a_t: Vec<f64>,
    pub aa: f64,
    pub aia: f64,
    pub la: f64,
}

impl ScoreTrack {
    pub fn from_scores(a_t: Vec<f64>) -> Result<Self> {
        let running = running_aa(&a_t)?;
        Ok(Self { aa: aa(&a_t)?, aia: aia(&running)?, la: *running.last().expect("non-empty"), a_t })
    }
}

/// Reference runs evaluated on the same test sets as the main run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub multitask_classifier: ScoreTrack,
    pub multitask_generative: ScoreTrack,
    pub vanilla_conditioning: ScoreTrack,
}

/// A classifier trained on all real data seen up to each task.
pub fn multitask_classifier_scores(stream: &TaskStream, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<f64>> {
    (1..=stream.len())
        .map(|t| {
            let labels = stream.labels_upto(t);
            fit_and_score(
                &stream.train_upto(t),
                &stream.test_upto(t),
                &labels,
                &cfg.classifier,
                derive(seed, Stream::Classifier, t as u64),
            )
        })
        .collect()
}

/// One generative model trained on the whole stream at once; after each
/// task the classifier only sees its samples of the classes seen so far.
pub fn multitask_generative_scores(stream: &TaskStream, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut init = rng_for(seed, Stream::Init, 0);
    let mut net = VectorFieldNet::new(cfg.net.clone(), &mut init)?;
    for y in stream.labels_upto(stream.len()) {
        net.add_embedding_class(y, &mut init)?;
    }
    train_phase(&mut net, Phase::Base, &stream.train_upto(stream.len()), &cfg.task1, rng_for(seed, Stream::Path, 0))?;
    let per_class = cfg.resample * stream.train_per_class();
    (1..=stream.len())
        .map(|t| {
            let labels = stream.labels_upto(t);
            let s = synthesize(&net, &labels, per_class, &cfg.solver, seed, t)?;
            fit_and_score(
                &s.data,
                &stream.test_upto(t),
                &labels,
                &cfg.classifier,
                derive(seed, Stream::Classifier, t as u64),
            )
        })
        .collect()
}

pub fn bounds_runs(stream: &TaskStream, cfg: &ExperimentConfig, seed: u64) -> Result<Bounds> {
    let vanilla_cfg = ExperimentConfig { conditioning: Conditioning::Embeddings, ..cfg.clone() };
    let vanilla = run_algorithm1(stream, &vanilla_cfg, seed)?;
    Ok(Bounds {
        multitask_classifier: ScoreTrack::from_scores(multitask_classifier_scores(stream, cfg, seed)?)?,
        multitask_generative: ScoreTrack::from_scores(multitask_generative_scores(stream, cfg, seed)?)?,
        vanilla_conditioning: ScoreTrack::from_scores(vanilla.metrics.scores())?,
    })
}
