//! Selective classification with an extra abstention output.
//!
//! The network emits `c + 1` logits; the last one is the abstention score.
//! Targets are kept for the `c` real classes only and follow the same EMA as
//! supervised training; the loss consumes the target mass on the observed
//! label, pushing the remainder onto the abstention column.

use alloc::vec::Vec;

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::losses::Objective;
use crate::nn::Mlp;
use crate::optim::{Sgd, SgdConfig};
use crate::report::SelectiveEpoch;
use crate::rng::{self, streams};
use crate::sat::{LoopOptions, TargetStore};
use crate::tensor::{argmax, softmax_into, softmax_rows, Tensor};
use crate::train::{accuracy, check_batch_size, epoch_batches};

#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveConfig {
    pub start_epoch: usize,
    pub alpha: f64,
    /// Update targets with the first-`c` softmax mass renormalised to sum to
    /// one; when false the raw (sub-stochastic) mass is used.
    pub renormalize: bool,
}

impl Default for SelectiveConfig {
    fn default() -> Self {
        Self {
            start_epoch: 0,
            alpha: 0.99,
            renormalize: true,
        }
    }
}

impl SelectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid(
                "alpha",
                alloc::format!("{} outside (0, 1)", self.alpha),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Class(usize),
    Abstain,
}

/// Abstains iff the abstention probability exceeds `tau`; otherwise the argmax
/// over the real classes.
pub fn selective_predict(logits: &[f64], tau: f64) -> Result<Decision> {
    if logits.len() < 3 {
        return Err(Error::Shape(alloc::format!(
            "need c + 1 ≥ 3 logits, got {}",
            logits.len()
        )));
    }
    let mut p = alloc::vec![0.0; logits.len()];
    softmax_into(logits, &mut p);
    Ok(decide(&p, tau))
}

fn decide(p: &[f64], tau: f64) -> Decision {
    let c = p.len() - 1;
    if p[c] > tau {
        Decision::Abstain
    } else {
        Decision::Class(argmax(&p[..c]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskCoveragePoint {
    pub requested: f64,
    /// Achieved fraction of classified samples.
    pub coverage: f64,
    pub tau: f64,
    pub n_classified: usize,
    pub selective_error: f64,
}

/// For each requested coverage `q`, `τ` is the `⌊q·m⌉`-th smallest abstention
/// probability; every sample at or below `τ` is classified, so ties admit
/// extra samples. Errors are counted against `labels`.
pub fn risk_coverage_curve(
    model: &Mlp,
    inputs: &Tensor,
    labels: &[usize],
    coverages: &[f64],
) -> Result<Vec<RiskCoveragePoint>> {
    let p = softmax_rows(&model.forward(inputs)?)?;
    risk_coverage_from_probs(&p, labels, coverages)
}

pub fn risk_coverage_from_probs(
    p: &Tensor,
    labels: &[usize],
    coverages: &[f64],
) -> Result<Vec<RiskCoveragePoint>> {
    let (m, cols) = p.dims2()?;
    if cols < 3 {
        return Err(Error::Shape(alloc::format!(
            "need c + 1 ≥ 3 columns, got {cols}"
        )));
    }
    if labels.len() != m {
        return Err(Error::Shape(alloc::format!(
            "{m} rows but {} labels",
            labels.len()
        )));
    }
    let c = cols - 1;
    let mut scores: Vec<f64> = p.row_iter().map(|r| r[c]).collect();
    scores.sort_by(f64::total_cmp);
    coverages
        .iter()
        .map(|&q| {
            if !(0.0..=1.0).contains(&q) {
                return Err(invalid("coverage", alloc::format!("{q} outside [0, 1]")));
            }
            let k = libm::round(q * m as f64) as usize;
            if k == 0 {
                return Err(Error::EmptySelection { coverage: q });
            }
            let tau = scores[k - 1];
            let (mut n, mut wrong) = (0usize, 0usize);
            for (row, &y) in p.row_iter().zip(labels) {
                if let Decision::Class(pred) = decide(row, tau) {
                    n += 1;
                    wrong += usize::from(pred != y);
                }
            }
            Ok(RiskCoveragePoint {
                requested: q,
                coverage: n as f64 / m as f64,
                tau,
                n_classified: n,
                selective_error: wrong as f64 / n as f64,
            })
        })
        .collect()
}

fn class_mass(p: &[f64], c: usize, renormalize: bool) -> Vec<f64> {
    let mass = &p[..c];
    if renormalize {
        let s: f64 = mass.iter().sum();
        mass.iter().map(|x| x / s).collect()
    } else {
        mass.to_vec()
    }
}

/// Trains a `c + 1`-output model with the abstention objective. Validation
/// accuracy is the plain argmax over the real classes against clean labels.
pub fn train_selective(
    model: &mut Mlp,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &SelectiveConfig,
    sgd: &SgdConfig,
    opts: &LoopOptions,
) -> Result<(TargetStore, Vec<SelectiveEpoch>)> {
    cfg.validate()?;
    sgd.validate()?;
    check_batch_size(opts.batch_size)?;
    let c = train.classes();
    if model.input_width() != train.dim() || model.output_width() != c + 1 {
        return Err(Error::Shape(alloc::format!(
            "model {:?} for data of dim {} needs {} outputs",
            model.widths(),
            train.dim(),
            c + 1
        )));
    }
    let labels = train.observed_labels();
    let mut store = TargetStore::from_labels(labels, c, cfg.alpha)?;
    let mut opt = Sgd::from_config(sgd);
    let mut rng = rng::seeded(opts.seed, streams::SHUFFLE);
    let mut report = Vec::with_capacity(sgd.epochs);
    for epoch in 0..sgd.epochs {
        let lr = sgd.lr_at(epoch)?;
        let mut total = 0.0;
        let batches = epoch_batches(train.len(), opts.batch_size, &mut rng);
        for idx in &batches {
            let xb = train.inputs().select_rows(idx);
            let mut tape = Tape::new();
            let x = tape.leaf(&xb)?;
            let (out, leaves) = model.forward_tape(&mut tape, x)?;
            if epoch >= cfg.start_epoch {
                let p = softmax_rows(tape.value(out))?;
                for (r, &i) in idx.iter().enumerate() {
                    store.ema_update(i, &class_mass(p.row(r), c, cfg.renormalize))?;
                }
            }
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let t_true = idx
                .iter()
                .zip(&yb)
                .map(|(&i, &y)| store.row(i)[y])
                .collect();
            let loss = tape.loss(out, Objective::Abstain { t_true, labels: yb })?;
            let grads = tape.backward(loss)?;
            model.accumulate_grads(&grads, &leaves)?;
            opt.step_model(model, lr)?;
            total += tape.scalar(loss);
        }
        let (clean_val_acc, mean_abstain_prob) = match val {
            Some(v) => {
                let p = softmax_rows(&model.forward(v.inputs())?)?;
                let pred: Vec<usize> = p.row_iter().map(|r| argmax(&r[..c])).collect();
                let abstain = p.row_iter().map(|r| r[c]).sum::<f64>() / v.len() as f64;
                (accuracy(&pred, v.clean_labels()), abstain)
            }
            None => (f64::NAN, f64::NAN),
        };
        report.push(SelectiveEpoch {
            epoch,
            lr,
            loss: total / batches.len() as f64,
            clean_val_acc,
            mean_abstain_prob,
        });
    }
    Ok((store, report))
}
