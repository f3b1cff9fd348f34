//! Minibatch SGD training of a shared-backbone model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{splitmix64, Dataset};
use crate::error::{Error, Result};
use crate::nn::{validate_weights, OptimizerState, ParamMode, SgdConfig, SharedBackboneModel, TargetMap};
use crate::tensor::{Tape, Tensor};

const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4531;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Tasks and their loss weights λ.
    pub weights: Vec<(String, f64)>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Base optimizer settings; the final 10× drop is added from `epochs`.
    pub sgd: SgdConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(weights: Vec<(String, f64)>, epochs: usize) -> Self {
        Self {
            weights,
            epochs,
            batch_size: 16,
            sgd: SgdConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_weights(&self.weights)?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be >= 1"));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> OptimizerState {
        OptimizerState::new(self.sgd.clone().with_final_drop(self.epochs))
    }
}

/// Example order for each epoch: a seeded shuffle on its own RNG stream.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ SHUFFLE_STREAM) ^ epoch as u64);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// One forward/backward pass of `Σ λ_c L_c` on `x` followed by an
/// optimizer step. Returns the loss before the step.
pub fn train_step(
    model: &mut SharedBackboneModel,
    opt: &mut OptimizerState,
    x: &Tensor,
    targets: &TargetMap,
    weights: &[(String, f64)],
) -> Result<f64> {
    let names: Vec<&str> = weights.iter().map(|(t, _)| t.as_str()).collect();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let fwd = model.forward(&mut tape, xv, &names, ParamMode::Trainable)?;
    let loss = model.multitask_loss_var(&mut tape, &fwd, targets, weights)?;
    let value = tape.value(loss).item()?;
    let mut grads = tape.backward(loss)?;
    model.zero_grad();
    model.store_gradients(&fwd, &mut grads);
    if model.params().iter().flat_map(|p| &p.grad).any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { op: "parameter gradient".into() });
    }
    opt.step(model.params_mut())?;
    Ok(value)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub steps: usize,
}

/// Plain (clean-input) training over every example of `dataset`.
pub fn train(model: &mut SharedBackboneModel, dataset: &Dataset, config: &TrainConfig) -> Result<Vec<EpochStats>> {
    train_with(model, dataset, config, &mut |_, _| Ok(()))
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    model: &mut SharedBackboneModel,
    dataset: &Dataset,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStats, &SharedBackboneModel) -> Result<()>,
) -> Result<Vec<EpochStats>> {
    config.validate()?;
    let names: Vec<&str> = config.weights.iter().map(|(t, _)| t.as_str()).collect();
    for t in &names {
        model.task(t)?;
    }
    let mut opt = config.optimizer();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        opt.set_epoch(epoch);
        let mut total = 0.0;
        let batches = epoch_batches(dataset.len(), config.batch_size, config.seed, epoch);
        for (b, idx) in batches.iter().enumerate() {
            let (x, targets) = dataset.batch(idx, &names)?;
            total += train_step(model, &mut opt, &x, &targets, &config.weights).map_err(|e| match e {
                Error::NonFinite { op } => Error::NonFinite {
                    op: format!("epoch {epoch} batch {b}: {op}"),
                },
                other => other,
            })?;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: total / batches.len() as f64,
            lr: opt.lr,
            steps: batches.len(),
        };
        on_epoch(&stats, model)?;
        history.push(stats);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_every_example_once() {
        let b = epoch_batches(23, 5, 9, 2);
        assert_eq!(b.len(), 5);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert_ne!(epoch_batches(23, 5, 9, 3), b);
        assert_eq!(epoch_batches(23, 5, 9, 2), b);
    }
}
