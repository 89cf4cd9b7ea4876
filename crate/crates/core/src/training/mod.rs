//! Stepped learning-rate schedule, momentum SGD, single training steps and
//! the full training loop with checkpoints and a metrics log.

mod checkpoint;
mod run;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::TileSample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub use checkpoint::{
    load_checkpoint, read_records, save_checkpoint, write_records, Checkpoint, Record, CHECKPOINT_VERSION, MAGIC,
    MOMENTUM_PREFIX,
};
pub use run::{train_loop, validation_tiles, TrainOptions, TrainOutcome, METRICS_FILE};

/// Base learning rate of [`TrainConfig::desk`].
pub const DESK_BASE_LR: f64 = 3e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub tile_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Validate every this many steps (and after the last one).
    pub eval_every: u64,
    /// Write a checkpoint every this many steps (and after the last one).
    pub checkpoint_every: u64,
    /// Crops drawn from each training image per epoch.
    pub samples_per_image: usize,
    /// Share of the tile each class must occupy in a training crop.
    pub min_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl TrainConfig {
    /// 10000 steps of 11 tiles of 640x640, lr 0.1, momentum 0.9.
    pub fn full() -> Self {
        TrainConfig {
            total_steps: 10_000,
            batch_size: 11,
            tile_size: 640,
            base_lr: 0.1,
            momentum: 0.9,
            seed: 0,
            eval_every: 500,
            checkpoint_every: 1000,
            samples_per_image: 197,
            min_fraction: crate::data::DEFAULT_MIN_FRACTION,
        }
    }

    /// 2000 steps of 8 tiles of 64x64 at a base rate of 0.0003, same
    /// momentum and schedule shape.
    ///
    /// Without normalisation layers the freshly initialised network has a
    /// gradient norm near 90 on such batches. From 0.001 upward the first
    /// updates overshoot and some seeds diverge within a few steps.
    pub fn desk() -> Self {
        TrainConfig {
            total_steps: 2000,
            batch_size: 8,
            tile_size: 64,
            base_lr: DESK_BASE_LR,
            eval_every: 200,
            checkpoint_every: 500,
            samples_per_image: 16,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("train config", msg));
        if self.total_steps == 0 {
            return bad("total_steps must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if self.batch_size == 0 || self.tile_size == 0 || self.samples_per_image == 0 {
            return bad("batch_size, tile_size and samples_per_image must be positive".into());
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 {
            return bad("eval_every and checkpoint_every must be positive".into());
        }
        Ok(())
    }

    /// Whether `other` replays the same optimisation trajectory; reporting
    /// cadences may differ.
    pub fn same_trajectory(&self, other: &TrainConfig) -> bool {
        let strip = |c: &TrainConfig| TrainConfig {
            eval_every: 1,
            checkpoint_every: 1,
            ..c.clone()
        };
        strip(self) == strip(other)
    }

    /// `key=value` summary for log headers.
    pub fn describe(&self) -> String {
        format!(
            "total_steps={} batch_size={} tile_size={} base_lr={} momentum={} seed={} eval_every={} checkpoint_every={} samples_per_image={} min_fraction={}",
            self.total_steps,
            self.batch_size,
            self.tile_size,
            self.base_lr,
            self.momentum,
            self.seed,
            self.eval_every,
            self.checkpoint_every,
            self.samples_per_image,
            self.min_fraction
        )
    }
}

/// `base_lr` for the first half of training, a tenth of it until three
/// quarters, a hundredth afterwards. Boundaries are `floor(total / 2)` and
/// `floor(3 * total / 4)`.
pub fn lr_at(step: u64, config: &TrainConfig) -> Result<f64> {
    let total = config.total_steps;
    if step >= total {
        return Err(Error::invalid("lr_at", format!("step {step} outside 0..{total}")));
    }
    Ok(if step < total / 2 {
        config.base_lr
    } else if step < 3 * total / 4 {
        config.base_lr / 10.0
    } else {
        config.base_lr / 100.0
    })
}

/// One velocity buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocities: Vec<Tensor<f32>>,
}

impl OptimizerState {
    pub fn zeros_like(model: &Model<f32>) -> Self {
        OptimizerState {
            velocities: model.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// `v = momentum * v - lr * g; p = p + v`, elementwise. A non-finite
/// gradient aborts the step before anything is modified.
pub fn sgd_momentum_step(
    model: &mut Model<f32>,
    grads: &[Tensor<f32>],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let specs = model.specs();
    if grads.len() != specs.len() || state.velocities.len() != specs.len() {
        return Err(Error::invalid(
            "sgd",
            format!(
                "{} parameters, {} gradients, {} velocities",
                specs.len(),
                grads.len(),
                state.velocities.len()
            ),
        ));
    }
    for ((spec, g), v) in specs.iter().zip(grads).zip(&state.velocities) {
        for other in [g.shape(), v.shape()] {
            if other != spec.shape {
                return Err(Error::ShapeMismatch {
                    op: "sgd",
                    left: spec.shape,
                    right: other,
                });
            }
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                name: spec.name.clone(),
            });
        }
    }
    let (lr, mu) = (lr as f32, momentum as f32);
    for ((p, g), v) in model.params_mut().iter_mut().zip(grads).zip(&mut state.velocities) {
        for ((p, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *v = mu * *v - lr * g;
            *p += *v;
        }
    }
    Ok(())
}

/// Stack tiles into `(B, 3, T, T)` and concatenate their targets.
pub fn collate(batch: &[TileSample], tile: usize) -> Result<(Tensor<f32>, Vec<u8>)> {
    if batch.is_empty() {
        return Err(Error::invalid("train_step", "empty batch"));
    }
    let expected = crate::tensor::Shape::new(1, 3, tile, tile);
    for s in batch {
        if s.tile.shape() != expected {
            return Err(Error::ShapeMismatch {
                op: "train_step tile",
                left: expected,
                right: s.tile.shape(),
            });
        }
        if s.target.len() != tile * tile {
            return Err(Error::invalid(
                "train_step",
                format!("target has {} pixels, tile has {}", s.target.len(), tile * tile),
            ));
        }
    }
    let tiles: Vec<Tensor<f32>> = batch.iter().map(|s| s.tile.clone()).collect();
    let targets = batch.iter().flat_map(|s| s.target.iter().copied()).collect();
    Ok((Tensor::stack(&tiles)?, targets))
}

/// Mean pixelwise cross-entropy of `model` on a batch, and the gradient of
/// every parameter.
pub fn loss_and_grads(model: &Model<f32>, images: &Tensor<f32>, targets: &[u8]) -> Result<(f32, Vec<Tensor<f32>>)> {
    let mut tape = Tape::new();
    let x = tape.leaf(images.clone());
    let trace = model.forward_on(&mut tape, x, true)?;
    let loss = tape.cross_entropy_loss(trace.probs, targets)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let grads = trace
        .params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.take_or_zeros(v, p.shape()))
        .collect();
    Ok((value, grads))
}

/// Forward, loss, backward and one momentum update at `lr_at(step)`.
/// Returns the loss before the update.
pub fn train_step(
    model: &mut Model<f32>,
    batch: &[TileSample],
    state: &mut OptimizerState,
    step: u64,
    config: &TrainConfig,
) -> Result<f32> {
    let m = model.config().required_multiple();
    if !config.tile_size.is_multiple_of(m) {
        return Err(Error::invalid(
            "train_step",
            format!("tile {} must be a multiple of {m}", config.tile_size),
        ));
    }
    let (images, targets) = collate(batch, config.tile_size)?;
    let lr = lr_at(step, config)?;
    let (loss, grads) = loss_and_grads(model, &images, &targets)?;
    if !loss.is_finite() {
        return Err(Error::invalid(
            "train_step",
            format!("loss became {loss} at step {step}"),
        ));
    }
    sgd_momentum_step(model, &grads, state, lr, config.momentum)?;
    Ok(loss)
}

#[cfg(test)]
mod tests;
