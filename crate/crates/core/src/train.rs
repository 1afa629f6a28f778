//! Shared pieces of the training loops.

use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::autodiff::Tape;
use crate::error::{invalid, Result};
use crate::losses::Objective;
use crate::nn::Mlp;
use crate::optim::Sgd;
use crate::rng::Rng;
use crate::tensor::{argmax, Tensor};

/// One epoch's mini-batches: a fresh permutation of `0..n` cut into chunks.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub(crate) fn check_batch_size(batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(invalid("batch_size", "must be positive"));
    }
    Ok(())
}

/// Row-wise argmax of `model(x)`, optionally restricted to the first `cols` outputs.
pub(crate) fn predict(model: &Mlp, x: &Tensor, cols: Option<usize>) -> Result<Vec<usize>> {
    let out = model.forward(x)?;
    let c = cols.unwrap_or(out.cols());
    Ok(out.row_iter().map(|r| argmax(&r[..c])).collect())
}

pub(crate) fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

/// Forward, attach `objective`, backward, and take one optimizer step.
/// Returns the batch loss.
pub(crate) fn sgd_update(
    model: &mut Mlp,
    opt: &mut Sgd,
    xb: &Tensor,
    objective: Objective,
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(xb)?;
    let (out, leaves) = model.forward_tape(&mut tape, x)?;
    let loss = tape.loss(out, objective)?;
    let grads = tape.backward(loss)?;
    model.accumulate_grads(&grads, &leaves)?;
    opt.step_model(model, lr)?;
    Ok(tape.scalar(loss))
}
