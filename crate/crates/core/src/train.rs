//! Deterministic training loop.
//!
//! Every step draws its batch from a generator keyed by `(seed, step)`, so a
//! run resumed from a checkpoint replays exactly the draws an uninterrupted
//! run would have made.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::config::ModelConfig;
use crate::data::{augment_flip, stack_batch, synthetic_sample, Flip, ImageSample};
use crate::error::{Error, Result};
use crate::model::{dmtnet_forward, param_specs, Ctx, Dmtnet};
use crate::optim::{adam_step, cosine_lr, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::tensor::Element;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_min: f64,
    pub total_steps: usize,
    pub adam: AdamConfig,
    pub charbonnier_eps: f64,
    pub batch: usize,
    /// Square random crop per sample; `None` trains on whole images.
    pub crop: Option<usize>,
    /// Random horizontal/vertical flips.
    pub augment: bool,
    pub seed: u64,
    /// Checkpoint callback period in steps; `None` disables it.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 1e-4,
            lr_min: 1e-6,
            total_steps: 1000,
            adam: AdamConfig::default(),
            charbonnier_eps: 1e-3,
            batch: 1,
            crop: None,
            augment: true,
            seed: 0,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_init) {
            return Err(Error::arg(format!("need 0 <= lr_min <= lr_init, got {} and {}", self.lr_min, self.lr_init)));
        }
        if self.total_steps == 0 {
            return Err(Error::arg("total_steps must be at least 1"));
        }
        if self.batch == 0 {
            return Err(Error::arg("batch must be at least 1"));
        }
        if !(self.charbonnier_eps > 0.0) {
            return Err(Error::arg("charbonnier_eps must be positive"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::arg("checkpoint_every must be at least 1"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        cosine_lr(step, self.total_steps, self.lr_init, self.lr_min)
    }
}

/// Single-patch overfitting setup: the micro model, a 64x64 synthetic
/// dual-pixel patch and a 2000-step schedule from 1e-2.
pub fn toy_problem<T: Element>(seed: u64) -> Result<(ModelConfig, TrainConfig, ImageSample<T>)> {
    let sample = synthetic_sample("toy", 64, 64, 1, 1, 3)?;
    let cfg = TrainConfig { lr_init: 1e-2, total_steps: 2000, augment: false, seed, ..TrainConfig::default() };
    Ok((ModelConfig::micro(), cfg, sample))
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    /// Loss of the batch before this step's update.
    pub loss: f64,
}

/// Parameters plus optimizer state; `optim.step` counts completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub params: ParamStore<T>,
    pub optim: AdamState<T>,
}

impl<T: Element> TrainState<T> {
    pub fn new(model: &ModelConfig, seed: u64) -> Result<Self> {
        let params = Dmtnet::new(model.clone(), seed)?.params;
        let optim = AdamState::new(&params);
        Ok(Self { params, optim })
    }

    pub fn from_params(params: ParamStore<T>) -> Self {
        let optim = AdamState::new(&params);
        Self { params, optim }
    }

    pub fn step(&self) -> usize {
        self.optim.step as usize
    }
}

pub trait TrainCallbacks<T> {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    /// Called after every `checkpoint_every` completed steps.
    fn on_checkpoint(&mut self, _state: &TrainState<T>) -> Result<()> {
        Ok(())
    }
}

impl<T> TrainCallbacks<T> for () {}

/// The samples, crop origins and flips drawn for `step`.
pub fn draw_batch<T: Element>(
    cfg: &TrainConfig,
    data: &[ImageSample<T>],
    step: usize,
) -> Result<Vec<ImageSample<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step as u64);
    (0..cfg.batch)
        .map(|_| {
            let s = &data[rng.random_range(0..data.len())];
            let s = match cfg.crop {
                Some(c) => {
                    if s.height() < c || s.width() < c {
                        return Err(Error::arg(format!("sample `{}` is smaller than the {c} crop", s.id)));
                    }
                    let top = rng.random_range(0..=s.height() - c);
                    let left = rng.random_range(0..=s.width() - c);
                    s.crop(top, left, c)?
                }
                None => s.clone(),
            };
            if cfg.augment {
                augment_flip(&s, Flip::ALL[rng.random_range(0..4)])
            } else {
                Ok(s)
            }
        })
        .collect()
}

/// Runs steps `state.step()..total_steps`, updating `state` in place.
///
/// A non-finite loss or gradient stops the loop with an error and leaves
/// `state` as it was after the last good step.
pub fn train_loop<T: Element>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &[ImageSample<T>],
    state: &mut TrainState<T>,
    callbacks: &mut dyn TrainCallbacks<T>,
) -> Result<Vec<StepRecord>> {
    model.validate()?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    state.params.check_against(&param_specs(model))?;
    let stride = model.stem_stride();
    if let Some(c) = cfg.crop {
        if c == 0 || c % stride != 0 {
            return Err(Error::arg(format!("crop {c} is not a positive multiple of {stride}")));
        }
    }
    if state.step() > cfg.total_steps {
        return Err(Error::arg(format!("state is at step {} past total {}", state.step(), cfg.total_steps)));
    }
    let mut records = Vec::new();
    for step in state.step()..cfg.total_steps {
        let batch = draw_batch(cfg, data, step)?;
        let stack = |f: fn(&ImageSample<T>) -> &crate::Tensor<T>| {
            stack_batch(&batch.iter().map(f).collect::<Vec<_>>())
        };
        let (right, left, target) = (stack(|s| &s.right)?, stack(|s| &s.left)?, stack(|s| &s.target)?);
        let [_, _, h, w] = right.dims4()?;
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::shape(format!("{h}x{w} training input is not divisible by {stride}")));
        }

        let graph = Graph::new();
        let ctx = Ctx::new(&graph, &state.params);
        let out = dmtnet_forward(&ctx, model, &graph.constant(right), &graph.constant(left), None)?;
        let loss = graph.charbonnier(&out, &graph.constant(target), cfg.charbonnier_eps)?;
        let loss_value = loss.value().data()[0];
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        let grads = graph.backward(&loss)?;
        let lr = cfg.lr_at(step)?;
        state.params.set_grads(&grads)?;
        adam_step(&mut state.params, &mut state.optim, lr, &cfg.adam)?;

        let record = StepRecord { step, lr, loss: loss_value.to_f64_lossy() };
        callbacks.on_step(&record)?;
        records.push(record);
        if cfg.checkpoint_every.is_some_and(|k| (step + 1) % k == 0) {
            callbacks.on_checkpoint(state)?;
        }
    }
    Ok(records)
}
