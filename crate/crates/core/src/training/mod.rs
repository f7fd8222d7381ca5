//! Mini-batch gradient training of transform → aggregator → classifier
//! pipelines, with per-epoch exponential learning-rate decay, label
//! filtering, step-based checkpointing, and deterministic replay.

mod checkpoint;
mod label_filter;
mod model;
mod optimizer;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use label_filter::{build_label_filter, LabelFilter};
pub use model::{DataDims, Model, ModelGrads, ModelKind, ModelProbe, ModelSpec};
pub use optimizer::{clip_global_norm, Optimizer, OptimizerKind};

use serde::{Deserialize, Serialize};

use crate::data::{build_vocabulary, DatasetMeta, FrameSequence};
use crate::error::{Error, Result};
use crate::numeric::SeededRng;

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Multiplicative decay applied once per epoch.
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Emit a checkpoint every this many optimizer steps (plus one at the
    /// end of training).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Restrict training and prediction to the N rarest labels. Set
    /// programmatically (the run config file carries it at top level).
    #[serde(skip)]
    pub label_filter_keep: Option<usize>,
}

fn default_learning_rate() -> f64 {
    0.001
}

fn default_decay() -> f64 {
    0.95
}

fn default_batch_size() -> usize {
    128
}

fn default_checkpoint_every() -> u64 {
    1000
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be > 0"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config("decay must be in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every must be >= 1"));
        }
        Ok(())
    }
}

/// Learning rate at a 0-based epoch: `learning_rate · decay^epoch`.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    config.learning_rate * config.decay.powi(epoch as i32)
}

/// Everything a finished run hands back.
pub struct TrainOutcome {
    pub model: Model,
    pub checkpoints: Vec<Checkpoint>,
    /// Mean training loss per epoch, in step order.
    pub epoch_losses: Vec<f64>,
    /// Mean loss over the training set at initialization (inference mode).
    pub initial_loss: f64,
    /// Same measurement after the last step.
    pub final_loss: f64,
}

fn mean_loss(model: &Model, samples: &[FrameSequence]) -> Result<f64> {
    let mut total = 0.0;
    for sample in samples {
        let mut rng = SeededRng::from_text_seed(&sample.id);
        total += model.loss(&sample.frames, &sample.labels, false, &mut rng)?;
    }
    Ok(total / samples.len() as f64)
}

/// Runs seeded mini-batch training. Fully deterministic: the seed fixes
/// initialization, shuffles, dropout, and sampling, so reruns produce
/// byte-identical checkpoints.
pub fn train(
    spec: &ModelSpec,
    meta: &DatasetMeta,
    samples: &[FrameSequence],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::argument("training needs a non-empty dataset"));
    }
    let filter = match config.label_filter_keep {
        Some(keep) => {
            let vocab = build_vocabulary(samples, meta.vocab)?;
            Some(build_label_filter(&vocab, keep)?)
        }
        None => None,
    };

    let mut root = SeededRng::new(config.seed);
    let mut init_rng = root.split();
    // Dropout and frame-sampling stream; its state is checkpointed.
    let mut train_rng = root.split();

    let mut model = Model::init(spec, DataDims::from(meta), filter, &mut init_rng)?;
    let initial_loss = mean_loss(&model, samples)?;
    let mut optimizer = Optimizer::new(config.optimizer, &model);

    let mut checkpoints = Vec::new();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step: u64 = 0;

    if config.epochs == 0 {
        checkpoints.push(Checkpoint::from_model(&model, 0, 0, train_rng.state()));
        return Ok(TrainOutcome {
            final_loss: initial_loss,
            model,
            checkpoints,
            epoch_losses,
            initial_loss,
        });
    }

    let mut grads = model.zero_grads();
    for epoch in 0..config.epochs {
        let lr = lr_at(config, epoch);
        // Per-epoch permutation seeded as seed xor epoch, then split.
        let mut epoch_rng = SeededRng::new(config.seed ^ epoch as u64).split();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        epoch_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            step += 1;
            for (_, t) in grads.tensors_mut() {
                t.scale(0.0);
            }
            let mut batch_loss = 0.0;
            for &index in batch {
                let sample = &samples[index];
                batch_loss += model.loss_and_grad(
                    &sample.frames,
                    &sample.labels,
                    true,
                    &mut train_rng,
                    &mut grads,
                )?;
            }
            let scale = 1.0 / batch.len() as f64;
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(Error::Training {
                    step,
                    msg: format!("loss became {batch_loss}"),
                });
            }
            grads.scale(scale);
            if model.is_recurrent() {
                clip_global_norm(&mut grads, 5.0);
            }
            optimizer.step(&mut model, &grads, lr, step);
            loss_sum += batch_loss;
            batches += 1;

            if step % config.checkpoint_every == 0 {
                checkpoints.push(Checkpoint::from_model(&model, step, epoch, train_rng.state()));
            }
        }
        epoch_losses.push(loss_sum / batches as f64);
    }

    if checkpoints.last().map_or(true, |c| c.step != step) {
        checkpoints.push(Checkpoint::from_model(
            &model,
            step,
            config.epochs,
            train_rng.state(),
        ));
    }
    let final_loss = mean_loss(&model, samples)?;
    Ok(TrainOutcome {
        model,
        checkpoints,
        epoch_losses,
        initial_loss,
        final_loss,
    })
}
