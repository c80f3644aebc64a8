use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::{sgd_step, ExtraGrad, Network, SgdState};
use crate::data::Dataset;
use crate::error::{Error, Result};

const EVAL_BATCH: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub steps: usize,
}

/// One shuffled pass over `data`. `extra` is consulted before every step and
/// may return a regularizer gradient computed from the current weights.
pub fn train_epoch<F>(
    net: &mut Network,
    state: &mut SgdState,
    data: &Dataset,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    mut extra: F,
) -> Result<EpochStats>
where
    F: FnMut(&Network) -> Option<ExtraGrad>,
{
    if data.is_empty() {
        return Err(Error::input("empty training set"));
    }
    if batch_size == 0 {
        return Err(Error::input("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut steps = 0;
    for chunk in order.chunks(batch_size) {
        let (batch, labels) = data.batch(chunk);
        let (_, cache) = net.forward(&batch)?;
        let grads = net.backward(&cache, &labels)?;
        let reg = extra(net);
        sgd_step(net, &grads, state, reg.as_ref())?;
        total += grads.loss;
        steps += 1;
    }
    Ok(EpochStats {
        mean_loss: total / steps as f64,
        steps,
    })
}

/// Index of the largest entry; the first one wins ties.
pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Fraction of examples whose top-1 prediction matches the label.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::input("cannot evaluate on an empty dataset"));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (batch, labels) = data.batch(chunk);
        let logits = net.predict(&batch)?;
        for (r, &label) in labels.iter().enumerate() {
            if argmax(logits.row(r)) == label as usize {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
