//! Shared mini-batch training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::params::{Optimizer, OptimizerConfig, ParameterStore, UpdateMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            seed: 0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainOptions {
    pub fn new(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            seed,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Held-fixed evaluation loss before the first update.
    pub initial_loss: f64,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Evaluation loss after the last update.
    pub final_loss: f64,
}

/// Sums per-item `(loss, gradients)` computed in parallel, reducing in
/// item order so the result does not depend on the thread count.
pub(crate) fn sum_ordered<T, F>(items: &[T], f: F) -> Result<(f64, Gradients)>
where
    T: Sync,
    F: Fn(&T) -> Result<(f64, Gradients)> + Sync,
{
    let parts: Vec<Result<(f64, Gradients)>> = items.par_iter().map(&f).collect();
    let mut loss = 0.0;
    let mut grads = Gradients::default();
    for p in parts {
        let (l, g) = p?;
        loss += l;
        grads.accumulate(&g);
    }
    Ok((loss, grads))
}

/// Runs `opts.epochs` passes of shuffled mini-batches. `batch_grad` gets the
/// current parameters, the item indices of one batch, the epoch and a
/// per-batch seed, and returns the mean batch loss and its gradients.
/// `evaluate` produces the before/after losses recorded in the report.
pub(crate) fn train_loop<B, E>(
    params: &mut ParameterStore,
    n_items: usize,
    opts: &TrainOptions,
    mask: &UpdateMask,
    mut batch_grad: B,
    evaluate: E,
) -> Result<TrainReport>
where
    B: FnMut(&ParameterStore, &[usize], usize, u64) -> Result<(f64, Gradients)>,
    E: Fn(&ParameterStore) -> Result<f64>,
{
    if n_items == 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let initial_loss = evaluate(params)?;
    if !initial_loss.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            loss: initial_loss,
        });
    }
    let batches_per_epoch = n_items.div_ceil(opts.batch_size);
    let mut optimizer = Optimizer::new(opts.optimizer.clone(), opts.epochs * batches_per_epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(opts.batch_size) {
            let batch_seed = rand::Rng::gen::<u64>(&mut rng);
            let (loss, grads) = batch_grad(params, batch, epoch, batch_seed)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            optimizer.step(params, &grads, mask);
            if !params.all_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            total += loss * batch.len() as f64;
        }
        epoch_losses.push(total / n_items as f64);
    }
    let final_loss = if opts.epochs == 0 { initial_loss } else { evaluate(params)? };
    Ok(TrainReport {
        initial_loss,
        epoch_losses,
        final_loss,
    })
}
