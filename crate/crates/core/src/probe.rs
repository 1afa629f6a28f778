//! Linear classifiers on frozen features.

use alloc::vec::Vec;

use crate::data::one_hot;
use crate::error::{Error, Result};
use crate::losses::Objective;
use crate::nn::Mlp;
use crate::optim::{Schedule, Sgd, SgdConfig};
use crate::rng::{self, streams};
use crate::tensor::{self, Tensor};
use crate::train::{accuracy, check_batch_size, epoch_batches, predict, sgd_update};

/// Learning rate of the online probe.
pub const ONLINE_PROBE_LR: f64 = 0.4;
/// Features whose training-split standard deviation is below this are zeroed.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub sgd: SgdConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            sgd: SgdConfig {
                lr: 0.1,
                momentum: 0.9,
                weight_decay: 0.0,
                warmup_epochs: 0,
                epochs: 40,
                schedule: Schedule::Cosine,
            },
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Per-feature `(mean, std)` of `x`, with the std replaced by zero below [`STD_FLOOR`].
fn standardizer(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (m, d) = (x.rows(), x.cols());
    let mut mean = alloc::vec![0.0; d];
    x.row_iter()
        .for_each(|r| mean.iter_mut().zip(r).for_each(|(a, v)| *a += v / m as f64));
    let mut var = alloc::vec![0.0; d];
    for r in x.row_iter() {
        for ((s, v), mu) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - mu) * (v - mu) / m as f64;
        }
    }
    let std = var
        .into_iter()
        .map(libm::sqrt)
        .map(|s| if s < STD_FLOOR { 0.0 } else { s })
        .collect();
    (mean, std)
}

fn standardize(x: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let mut out = x.clone();
    let d = x.cols();
    for row in out.data_mut().chunks_exact_mut(d) {
        for ((v, mu), s) in row.iter_mut().zip(mean).zip(std) {
            *v = if *s == 0.0 { 0.0 } else { (*v - mu) / s };
        }
    }
    out
}

/// Trains a softmax linear classifier on `train_x` (standardised with its own
/// statistics) and returns top-1 accuracy on `test_x`.
pub fn linear_eval(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    cfg.sgd.validate()?;
    check_batch_size(cfg.batch_size)?;
    let (m, d) = train_x.dims2()?;
    if train_y.len() != m || test_x.dims2()?.0 != test_y.len() || test_x.cols() != d {
        return Err(Error::Shape("features and labels disagree".into()));
    }
    if let Some(&y) = train_y.iter().chain(test_y).find(|&&y| y >= classes) {
        return Err(Error::IndexOutOfRange {
            index: y,
            len: classes,
        });
    }
    let (mean, std) = standardizer(train_x);
    let xs = standardize(train_x, &mean, &std);
    let labels = one_hot(train_y, classes);
    let mut probe = Mlp::zeros(&[d, classes])?;
    let mut opt = Sgd::from_config(&cfg.sgd);
    let mut rng = rng::seeded(cfg.seed, streams::PROBE);
    for epoch in 0..cfg.sgd.epochs {
        let lr = cfg.sgd.lr_at(epoch)?;
        for idx in epoch_batches(m, cfg.batch_size, &mut rng) {
            let obj = Objective::cross_entropy(labels.select_rows(&idx));
            sgd_update(&mut probe, &mut opt, &xs.select_rows(&idx), obj, lr)?;
        }
    }
    let pred = predict(&probe, &standardize(test_x, &mean, &std), None)?;
    Ok(accuracy(&pred, test_y))
}

/// Linear evaluation of `backbone` features.
pub fn encoder_eval(
    backbone: &Mlp,
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    linear_eval(
        &backbone.forward(train_x)?,
        train_y,
        &backbone.forward(test_x)?,
        test_y,
        classes,
        cfg,
    )
}

/// Linear classifier trained alongside another model on detached features.
/// Feature rows are ℓ2-normalised before use (zero rows stay zero).
#[derive(Debug, Clone)]
pub struct OnlineProbe {
    pub linear: Mlp,
    opt: Sgd,
}

impl OnlineProbe {
    pub fn new(dim: usize, classes: usize) -> Result<Self> {
        Ok(Self {
            linear: Mlp::zeros(&[dim, classes])?,
            opt: Sgd::new(0.9, 0.0),
        })
    }

    fn prepare(features: &Tensor) -> Tensor {
        let mut x = features.clone();
        let d = x.cols();
        for row in x.data_mut().chunks_exact_mut(d) {
            let n = tensor::l2_norm(row);
            if n > tensor::NORM_EPS {
                row.iter_mut().for_each(|v| *v /= n);
            } else {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        x
    }

    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        predict(&self.linear, &Self::prepare(features), None)
    }

    pub fn accuracy(&self, features: &Tensor, labels: &[usize]) -> Result<f64> {
        Ok(accuracy(&self.predict(features)?, labels))
    }
}

/// One SGD step of the probe on `features`; returns the batch loss. The
/// features are values, so nothing upstream can receive gradient.
pub fn online_probe_step(
    probe: &mut OnlineProbe,
    features: &Tensor,
    labels: &[usize],
    lr: f64,
) -> Result<f64> {
    let classes = probe.linear.output_width();
    if features.dims2()?.0 != labels.len() {
        return Err(Error::Shape("features and labels disagree".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::IndexOutOfRange {
            index: y,
            len: classes,
        });
    }
    let x = OnlineProbe::prepare(features);
    let obj = Objective::cross_entropy(one_hot(labels, classes));
    sgd_update(&mut probe.linear, &mut probe.opt, &x, obj, lr)
}
