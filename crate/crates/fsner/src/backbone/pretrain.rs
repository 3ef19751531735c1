//! Full-parameter next-token training of the miniature backbone. Run once,
//! up front, over rendered task text; the saved result is the checkpoint
//! both pipeline stages load as their starting model.

use super::model::Backbone;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::optim::{AdamW, AdamWConfig};
use crate::tape::Tape;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 3e-4,
            seed: 0,
        }
    }
}

/// One optimizer step = one sequence; batch size stays 1 throughout.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub epoch: usize,
    pub step: usize,
    /// Mean negative log-likelihood per predicted token.
    pub loss: f64,
}

/// Teacher-forced loss for one sequence on a fresh tape; position `t`
/// predicts token `t+1`, so every position but the first is a target.
fn sequence_loss(
    backbone: &Backbone,
    ids: &[usize],
    train_base: bool,
) -> Result<(Tape, crate::tape::NodeId)> {
    let mut tape = Tape::new();
    let fwd = backbone.forward_taped(&mut tape, ids, &[], &[], train_base)?;
    let coords: Vec<(usize, usize)> = ids
        .iter()
        .enumerate()
        .skip(1)
        .map(|(t, &id)| (t - 1, id))
        .collect();
    let picked = tape.gather_entries(fwd.log_probs, coords);
    let mean = tape.mean_rows(picked);
    let loss = tape.scale(mean, -1.0);
    Ok((tape, loss))
}

pub fn pretrain(
    backbone: &mut Backbone,
    sequences: &[Vec<usize>],
    cfg: &PretrainConfig,
) -> Result<Vec<PretrainRecord>> {
    if sequences.is_empty() {
        return Err(Error::Config("pretraining needs at least one sequence".into()));
    }
    for (i, s) in sequences.iter().enumerate() {
        if s.len() < 2 {
            return Err(Error::Config(format!(
                "sequence {i} has {} token(s); next-token training needs at least 2",
                s.len()
            )));
        }
        if s.len() > backbone.config.max_positions {
            return Err(Error::Truncation {
                needed: s.len(),
                cutoff: backbone.config.max_positions,
            });
        }
    }
    let n_slots = backbone.params.entries().len();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            ..AdamWConfig::default()
        },
        n_slots,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs * sequences.len());
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &si in &order {
            let (tape, loss) = sequence_loss(backbone, &sequences[si], true)?;
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch} step {step}"
                )));
            }
            let mut grads = tape.backward(loss);
            let grad_vec: Vec<Option<Matrix>> = (0..n_slots).map(|s| grads.take(s)).collect();
            let mut slots = backbone.params.entries_mut();
            let mut params: Vec<(usize, &mut Matrix)> = slots
                .iter_mut()
                .enumerate()
                .map(|(s, entry)| (s, &mut *entry.1))
                .collect();
            opt.step(&mut params, &grad_vec);
            step += 1;
            log.push(PretrainRecord {
                epoch,
                step,
                loss: loss_val,
            });
        }
    }
    Ok(log)
}

/// Mean per-token negative log-likelihood over a held-out set, no updates.
pub fn evaluate_nll(backbone: &Backbone, sequences: &[Vec<usize>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ids in sequences {
        let (tape, loss) = sequence_loss(backbone, ids, false)?;
        total += tape.value(loss).item() * (ids.len() - 1) as f64;
        count += ids.len() - 1;
    }
    if count == 0 {
        return Err(Error::Config("held-out set has no target tokens".into()));
    }
    Ok(total / count as f64)
}
