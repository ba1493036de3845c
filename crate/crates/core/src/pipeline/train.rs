use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::dataset::Dataset;
use crate::flow::{cfm_loss, EmaState, PathDraws};
use crate::model::{ParamRef, Phase, VectorFieldNet};
use crate::optim::Adam;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Optimization settings of one training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub ema_decay: f64,
    /// Epoch from which the per-step average starts accumulating.
    pub ema_start_epoch: usize,
}

impl PhaseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(PipelineError::Invalid(
                "phase needs a positive batch size and lr, and ema decay in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseStats {
    pub steps: usize,
    /// Data points drawn into minibatches over the whole phase.
    pub samples_seen: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
}

/// Resumable training of one phase: Adam state, the moving average and the
/// shuffling stream persist across [`PhaseTrainer::run`] calls, so splitting
/// the epochs into chunks gives the same result as one call.
#[derive(Clone, Debug)]
pub struct PhaseTrainer {
    phase: Phase,
    cfg: PhaseConfig,
    refs: Vec<ParamRef>,
    sizes: Vec<usize>,
    opt: Adam,
    ema: EmaState,
    order: Vec<usize>,
    rng: Rng,
    epoch: usize,
    stats: PhaseStats,
}

impl PhaseTrainer {
    pub fn new(net: &VectorFieldNet, phase: Phase, data: &Dataset, cfg: &PhaseConfig, rng: Rng) -> Result<Self> {
        cfg.validate()?;
        let refs = net.trainable_params(phase)?;
        if data.is_empty() {
            return Err(PipelineError::Invalid("phase has no training data".into()));
        }
        if let Phase::Adapter(y) | Phase::Embedding(y) = phase {
            if data.labels.iter().any(|&l| l != y) {
                return Err(PipelineError::Invalid(format!("class phase for {y} received other labels")));
            }
        }
        let view = param_view(net, &refs)?;
        let sizes = view.iter().map(|p| p.len()).collect();
        let ema = EmaState::new(cfg.ema_decay, cfg.ema_start_epoch, &view)?;
        Ok(Self {
            phase,
            cfg: cfg.clone(),
            refs,
            sizes,
            opt: Adam::new(cfg.lr, cfg.warmup_steps),
            ema,
            order: (0..data.len()).collect(),
            rng,
            epoch: 0,
            stats: PhaseStats::default(),
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn remaining(&self) -> usize {
        self.cfg.epochs - self.epoch
    }

    /// Runs up to `epochs` more epochs, stopping at the configured total.
    pub fn run(&mut self, net: &mut VectorFieldNet, data: &Dataset, epochs: usize) -> Result<()> {
        if data.len() != self.order.len() {
            return Err(PipelineError::Invalid("training data changed between chunks".into()));
        }
        let d = data.dim;
        let stop = (self.epoch + epochs).min(self.cfg.epochs);
        while self.epoch < stop {
            let epoch = self.epoch;
            self.order.shuffle(&mut self.rng);
            for chunk in self.order.chunks(self.cfg.batch_size) {
                let n = chunk.len();
                let x0: Vec<f64> = chunk.iter().flat_map(|&i| data.point(i).iter().copied()).collect();
                let labels: Vec<u32> = chunk.iter().map(|&i| data.labels[i]).collect();
                let draws = PathDraws::sample(n, d, &mut self.rng);
                let mut tape = Tape::new();
                let mut handles: Vec<Var> = Vec::new();
                let phase = self.phase;
                let loss = cfm_loss(&mut tape, &Tensor::matrix(n, d, x0)?, &labels, &draws, |tape, t, x, l| {
                    let (v, h) = net.forward_on_tape(tape, t, x, l, Some(phase))?;
                    handles = h;
                    Ok(v)
                })?;
                let value = tape.value(loss)?.item();
                if !value.is_finite() {
                    return Err(PipelineError::Invalid(format!("loss diverged at epoch {epoch}")));
                }
                self.stats.first_loss.get_or_insert(value);
                self.stats.last_loss = Some(value);
                let grads = tape.backward(loss)?;
                let g: Vec<Vec<f64>> = handles
                    .iter()
                    .zip(&self.sizes)
                    .map(|(h, &len)| grads.get(*h).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; len]))
                    .collect();
                let gs: Vec<&[f64]> = g.iter().map(Vec::as_slice).collect();
                self.opt.step(&mut net.phase_slices_mut(phase)?, &gs);
                self.stats.steps += 1;
                self.stats.samples_seen += n;
                self.ema.update(epoch, &param_view(net, &self.refs)?)?;
            }
            self.epoch += 1;
        }
        Ok(())
    }

    /// Loads the averaged weights into the network.
    pub fn finish(mut self, net: &mut VectorFieldNet) -> Result<PhaseStats> {
        self.ema.swap(&mut net.phase_slices_mut(self.phase)?)?;
        Ok(self.stats)
    }
}

fn param_view<'a>(net: &'a VectorFieldNet, refs: &[ParamRef]) -> Result<Vec<&'a [f64]>> {
    Ok(refs.iter().map(|r| net.param(*r)).collect::<std::result::Result<_, _>>()?)
}

/// Trains the parameters of `phase` on `data` with the flow-matching loss.
///
/// The average is updated after every optimizer step once the epoch reaches
/// the activation epoch, and is loaded into the network at the end.
pub fn train_phase(
    net: &mut VectorFieldNet,
    phase: Phase,
    data: &Dataset,
    cfg: &PhaseConfig,
    rng: Rng,
) -> Result<PhaseStats> {
    let mut trainer = PhaseTrainer::new(net, phase, data, cfg, rng)?;
    trainer.run(net, data, cfg.epochs)?;
    trainer.finish(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funlora::{AdapterSpec, Combine, FunctionalKind, Layout};
    use crate::model::NetConfig;
    use crate::rng::{rng_for, Stream};
    use rand_distr::{Distribution, Normal};

    fn blob(label: u32, cx: f64, n: usize) -> Dataset {
        let mut rng = rng_for(9, Stream::Data, label as u64);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut d = Dataset::new(2);
        for _ in 0..n {
            d.push(&[cx + noise.sample(&mut rng), noise.sample(&mut rng)], label);
        }
        d
    }

    fn cfg(epochs: usize) -> PhaseConfig {
        PhaseConfig { epochs, batch_size: 32, lr: 1e-2, warmup_steps: 0, ema_decay: 0.9, ema_start_epoch: epochs }
    }

    fn small_net() -> VectorFieldNet {
        let mut rng = rng_for(0, Stream::Init, 0);
        let mut net =
            VectorFieldNet::new(NetConfig { hidden: 16, hidden_layers: 2, ..NetConfig::default() }, &mut rng).unwrap();
        net.add_embedding_class(0, &mut rng).unwrap();
        net
    }

    #[test]
    fn base_phase_reduces_loss() {
        let mut net = small_net();
        let data = blob(0, 2.0, 128);
        let stats = train_phase(&mut net, Phase::Base, &data, &cfg(15), rng_for(0, Stream::Path, 0)).unwrap();
        assert_eq!(stats.steps, 15 * 4);
        assert_eq!(stats.samples_seen, 15 * 128);
        assert!(stats.last_loss.unwrap() < stats.first_loss.unwrap());
    }

    #[test]
    fn adapter_phase_touches_only_its_class() {
        let mut net = small_net();
        let spec =
            AdapterSpec { kind: FunctionalKind::Cos { p: 3, trainable: true }, combine: Combine::Mul, calibrate: true };
        net.attach_adapters(spec, Layout::PerLayer, &[0, 1, 2]).unwrap();
        let mut rng = rng_for(0, Stream::Init, 1);
        net.freeze_base();
        net.complete_class(0).unwrap();
        net.add_adapter_class(1, &mut rng).unwrap();
        net.add_adapter_class(2, &mut rng).unwrap();
        let before = net.clone();
        train_phase(&mut net, Phase::Adapter(1), &blob(1, -2.0, 64), &cfg(3), rng_for(0, Stream::Path, 1)).unwrap();
        assert_eq!(net.layers(), before.layers());
        assert_eq!(net.embeddings(), before.embeddings());
        let (s, b) = (net.adapters().unwrap(), before.adapters().unwrap());
        assert_eq!(s.adapters(2).unwrap(), b.adapters(2).unwrap());
        assert_ne!(s.adapters(1).unwrap(), b.adapters(1).unwrap());
    }

    #[test]
    fn frozen_and_foreign_data_abort() {
        let mut net = small_net();
        net.freeze_base();
        let err =
            train_phase(&mut net, Phase::Base, &blob(0, 0.0, 8), &cfg(1), rng_for(0, Stream::Path, 0)).unwrap_err();
        assert!(matches!(err, PipelineError::Model(crate::model::ModelError::Frozen(_))));
        let mut net = small_net();
        net.add_embedding_class(1, &mut rng_for(0, Stream::Init, 5)).unwrap();
        assert!(
            train_phase(&mut net, Phase::Embedding(1), &blob(0, 0.0, 8), &cfg(1), rng_for(0, Stream::Path, 0)).is_err()
        );
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let mut net = small_net();
        let before = net.clone();
        let stats =
            train_phase(&mut net, Phase::Base, &blob(0, 1.0, 16), &cfg(0), rng_for(0, Stream::Path, 0)).unwrap();
        assert_eq!(stats.steps, 0);
        assert_eq!(net, before);
    }

    #[test]
    fn chunked_training_matches_one_call() {
        let data = blob(0, 1.5, 64);
        let c = PhaseConfig { ema_start_epoch: 2, ..cfg(6) };
        let mut whole = small_net();
        train_phase(&mut whole, Phase::Base, &data, &c, rng_for(1, Stream::Path, 0)).unwrap();
        let mut split = small_net();
        let mut tr = PhaseTrainer::new(&split, Phase::Base, &data, &c, rng_for(1, Stream::Path, 0)).unwrap();
        for k in [1, 3, 5] {
            tr.run(&mut split, &data, k).unwrap();
        }
        assert_eq!(tr.epochs_done(), 6);
        tr.finish(&mut split).unwrap();
        assert_eq!(whole, split);
    }
}
