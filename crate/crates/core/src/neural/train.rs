use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{loss_and_grad, Example};
use super::optim::{Adam, OptimConfig, StepOutcome};
use super::params::Params;
use crate::error::{Error, Result};

pub const OPTIMIZER_NOTE: &str =
    "Adam with linear warmup and exponential decay (stands in for ScaledAdam)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOpts {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            steps: 1000,
            batch_size: 16,
            optim: OptimConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    /// Batch loss measured before each update.
    pub losses: Vec<f64>,
    pub skipped_steps: usize,
    /// Items that never fit the context window.
    pub skipped_examples: usize,
    pub optimizer: String,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    /// Mean of the last `n` recorded losses.
    pub fn tail_loss(&self, n: usize) -> Option<f64> {
        let n = n.min(self.losses.len());
        (n > 0).then(|| self.losses[self.losses.len() - n..].iter().sum::<f64>() / n as f64)
    }
}

/// Minibatch training over `n_items` items. `make` builds the example for an
/// item (it may draw fresh corruption from the generator) or returns `None`
/// when the item does not fit. Items are visited in a fresh shuffled order
/// every epoch; everything is driven by one generator seeded from
/// `opts.seed`.
pub fn train<F>(params: &mut Params<f32>, n_items: usize, opts: &TrainOpts, mut make: F) -> Result<TrainReport>
where
    F: FnMut(usize, &mut ChaCha8Rng) -> Result<Option<Example>>,
{
    if n_items == 0 {
        return Err(Error::EmptyInput("training corpus is empty".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::new(opts.optim.clone(), params);
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut cursor = n_items;
    let mut unfit = vec![false; n_items];
    let mut losses = Vec::with_capacity(opts.steps);
    let mut skipped_steps = 0;
    let dropout = params.config.dropout > 0.0;

    for step in 0..opts.steps {
        let mut batch = Vec::with_capacity(opts.batch_size);
        let mut misses = 0usize;
        while batch.len() < opts.batch_size {
            if cursor == n_items {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let item = order[cursor];
            cursor += 1;
            match make(item, &mut rng)? {
                Some(ex) => batch.push(ex),
                None => {
                    unfit[item] = true;
                    misses += 1;
                    if misses > n_items {
                        return Err(Error::EmptyInput("no training item fits the context window".into()));
                    }
                }
            }
        }
        let (loss, grads) = if dropout {
            let mut drop_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            loss_and_grad(params, &batch, Some(&mut drop_rng))?
        } else {
            loss_and_grad(params, &batch, None)?
        };
        losses.push(loss);
        match adam.step(params, &grads) {
            StepOutcome::Applied { .. } => {}
            StepOutcome::Skipped { grad_norm } => {
                log::warn!("step {step}: non-finite gradient (norm {grad_norm}), update skipped");
                skipped_steps += 1;
            }
        }
        if step % 100 == 0 {
            log::debug!("step {step}: loss {loss:.4}");
        }
    }
    Ok(TrainReport {
        steps: opts.steps,
        losses,
        skipped_steps,
        skipped_examples: unfit.iter().filter(|&&u| u).count(),
        optimizer: OPTIMIZER_NOTE.to_string(),
    })
}
