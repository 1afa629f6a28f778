//! Supervised self-adaptive training.
//!
//! Each training sample owns a soft target `t_i`, initialised to its observed
//! one-hot label. Once the start epoch has passed, every visit to a sample
//! first moves its target toward the current prediction,
//! `t_i ← α·t_i + (1−α)·p_i`, and the batch loss is the cross entropy against
//! the targets, weighted per sample by `w_i = max_j t_ij` and normalised by
//! `Σ w_i`. Targets are data: no gradient flows into them.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::{labels_from_one_hot, one_hot, Dataset};
use crate::error::{invalid, Error, Result};
use crate::losses::{sample_weight, Objective, SceWeights, Weighting};
use crate::nn::Mlp;
use crate::optim::{Sgd, SgdConfig};
use crate::report::SupervisedEpoch;
use crate::rng::{self, streams};
use crate::tensor::{argmax, softmax_rows, Tensor};
use crate::train::{accuracy, check_batch_size, epoch_batches, predict};

/// Per-sample EMA targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetStore {
    targets: Tensor,
    alpha: f64,
}

impl TargetStore {
    /// Targets equal to the given one-hot label rows.
    pub fn init_targets(labels: &Tensor, alpha: f64) -> Result<Self> {
        labels_from_one_hot(labels)?;
        check_alpha(alpha)?;
        Ok(Self {
            targets: labels.clone(),
            alpha,
        })
    }

    pub fn from_labels(labels: &[usize], classes: usize, alpha: f64) -> Result<Self> {
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::IndexOutOfRange {
                index: y,
                len: classes,
            });
        }
        check_alpha(alpha)?;
        Ok(Self {
            targets: one_hot(labels, classes),
            alpha,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        self.targets.cols()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn targets(&self) -> &Tensor {
        &self.targets
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.targets.row(i)
    }

    /// `t_i ← α·t_i + (1−α)·p`.
    pub fn ema_update(&mut self, i: usize, p: &[f64]) -> Result<&[f64]> {
        if i >= self.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.len(),
            });
        }
        if p.len() != self.classes() {
            return Err(Error::Shape(alloc::format!(
                "prediction of width {} for {} classes",
                p.len(),
                self.classes()
            )));
        }
        let a = self.alpha;
        let row = self.targets.row_mut(i);
        row.iter_mut()
            .zip(p)
            .for_each(|(t, &pj)| *t = a * *t + (1.0 - a) * pj);
        Ok(self.targets.row(i))
    }

    pub fn weights(&self) -> Vec<f64> {
        self.targets.row_iter().map(sample_weight).collect()
    }

    /// Argmax class of each target (ties to the lowest index).
    pub fn recovered_labels(&self) -> Vec<usize> {
        self.targets.row_iter().map(argmax).collect()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid("alpha", alloc::format!("{alpha} outside (0, 1)")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SatLoss {
    Sat,
    /// Adds the reverse cross-entropy term.
    SatSce(SceWeights),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SatConfig {
    /// Epochs (0-based) before this one keep targets fixed at the labels.
    pub start_epoch: usize,
    pub alpha: f64,
    pub loss: SatLoss,
    /// Confidence re-weighting; when off every sample has weight 1.
    pub reweight: bool,
}

impl SatConfig {
    /// Start epoch as a fraction of the run (0.3 of the total, rounded),
    /// α = 0.9.
    pub fn for_epochs(total_epochs: usize) -> Self {
        Self {
            start_epoch: start_epoch_for(total_epochs, 0.3),
            alpha: 0.9,
            loss: SatLoss::Sat,
            reweight: true,
        }
    }

    /// Settings for 200-epoch schedules: start epoch 60, α = 0.9.
    pub fn long_schedule() -> Self {
        Self {
            start_epoch: 60,
            alpha: 0.9,
            loss: SatLoss::Sat,
            reweight: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)
    }
}

pub fn start_epoch_for(total_epochs: usize, fraction: f64) -> usize {
    libm::round(fraction * total_epochs as f64) as usize
}

/// `(E_s, α)` rescaled for a model of the given width relative to width 64:
/// `r = 64/width`, `E_s = round(40·r)`, `α = 0.9^(1/r)`.
pub fn width_schedule(width: usize) -> Result<(usize, f64)> {
    if width == 0 {
        return Err(invalid("width", "must be positive"));
    }
    let r = 64.0 / width as f64;
    Ok((libm::round(40.0 * r) as usize, libm::pow(0.9, 1.0 / r)))
}

/// Fraction of samples whose target argmax equals the clean label, and the
/// `c×c` confusion counts `[clean][recovered]`.
pub fn recovery_metrics(store: &TargetStore, clean: &[usize]) -> Result<(f64, Vec<Vec<usize>>)> {
    if clean.len() != store.len() {
        return Err(Error::Shape(alloc::format!(
            "{} labels for {} targets",
            clean.len(),
            store.len()
        )));
    }
    let c = store.classes();
    let mut confusion = vec![vec![0usize; c]; c];
    let recovered = store.recovered_labels();
    for (&y, &r) in clean.iter().zip(&recovered) {
        confusion[y][r] += 1;
    }
    Ok((accuracy(&recovered, clean), confusion))
}

/// Mean sample weight per `[clean][recovered]` cell; `None` for empty cells.
pub fn mean_weight_matrix(store: &TargetStore, clean: &[usize]) -> Result<Vec<Vec<Option<f64>>>> {
    if clean.len() != store.len() {
        return Err(Error::Shape(alloc::format!(
            "{} labels for {} targets",
            clean.len(),
            store.len()
        )));
    }
    let c = store.classes();
    let mut sum = vec![vec![0.0; c]; c];
    let mut count = vec![vec![0usize; c]; c];
    for (i, &y) in clean.iter().enumerate() {
        let t = store.row(i);
        let r = argmax(t);
        sum[y][r] += sample_weight(t);
        count[y][r] += 1;
    }
    Ok(sum
        .into_iter()
        .zip(count)
        .map(|(s, n)| {
            s.into_iter()
                .zip(n)
                .map(|(s, n)| (n > 0).then(|| s / n as f64))
                .collect()
        })
        .collect())
}

/// Mean weight over uncorrupted and corrupted samples (NaN for an empty group).
pub fn weight_split(store: &TargetStore, mask: &[bool]) -> (f64, f64) {
    let (mut clean, mut nc, mut bad, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (w, &m) in store.weights().into_iter().zip(mask) {
        if m {
            bad += w;
            nb += 1;
        } else {
            clean += w;
            nc += 1;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
    (mean(clean, nc), mean(bad, nb))
}

/// Shared loop options for supervised training.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopOptions {
    pub batch_size: usize,
    pub seed: u64,
}

fn epoch_metrics(
    model: &Mlp,
    train: &Dataset,
    val: Option<&Dataset>,
    store: &TargetStore,
    epoch: usize,
    lr: f64,
    loss: f64,
) -> Result<SupervisedEpoch> {
    let pred = predict(model, train.inputs(), None)?;
    let (noisy_val_acc, clean_val_acc) = match val {
        Some(v) => {
            let pv = predict(model, v.inputs(), None)?;
            (
                accuracy(&pv, v.observed_labels()),
                accuracy(&pv, v.clean_labels()),
            )
        }
        None => (f64::NAN, f64::NAN),
    };
    let (recovery_acc, _) = recovery_metrics(store, train.clean_labels())?;
    let (mean_clean_weight, mean_corrupt_weight) = weight_split(store, train.mask());
    Ok(SupervisedEpoch {
        epoch,
        lr,
        noisy_train_acc: accuracy(&pred, train.observed_labels()),
        clean_train_acc: accuracy(&pred, train.clean_labels()),
        noisy_val_acc,
        clean_val_acc,
        loss,
        recovery_acc,
        mean_clean_weight,
        mean_corrupt_weight,
    })
}

fn check_dims(model: &Mlp, train: &Dataset, classes_out: usize) -> Result<()> {
    if model.input_width() != train.dim() || model.output_width() != classes_out {
        return Err(Error::Shape(alloc::format!(
            "model {:?} for data of dim {} with {} outputs expected",
            model.widths(),
            train.dim(),
            classes_out
        )));
    }
    Ok(())
}

/// Plain empirical risk minimisation on the observed labels.
///
/// The returned store holds the (never updated) observed labels, so the
/// recovery and weight columns describe the fixed-label baseline.
pub fn train_erm(
    model: &mut Mlp,
    train: &Dataset,
    val: Option<&Dataset>,
    sgd: &SgdConfig,
    opts: &LoopOptions,
) -> Result<(TargetStore, Vec<SupervisedEpoch>)> {
    sgd.validate()?;
    check_batch_size(opts.batch_size)?;
    check_dims(model, train, train.classes())?;
    let labels = train.one_hot_observed();
    let store = TargetStore::from_labels(train.observed_labels(), train.classes(), 0.5)?;
    let mut opt = Sgd::from_config(sgd);
    let mut rng = rng::seeded(opts.seed, streams::SHUFFLE);
    let mut report = Vec::with_capacity(sgd.epochs);
    for epoch in 0..sgd.epochs {
        let lr = sgd.lr_at(epoch)?;
        let mut total = 0.0;
        let batches = epoch_batches(train.len(), opts.batch_size, &mut rng);
        for idx in &batches {
            let xb = train.inputs().select_rows(idx);
            let obj = Objective::cross_entropy(labels.select_rows(idx));
            total += crate::train::sgd_update(model, &mut opt, &xb, obj, lr)?;
        }
        let loss = total / batches.len() as f64;
        report.push(epoch_metrics(model, train, val, &store, epoch, lr, loss)?);
    }
    Ok((store, report))
}

/// Self-adaptive training on `train`; `val` (if any) is only evaluated.
pub fn train_supervised(
    model: &mut Mlp,
    train: &Dataset,
    val: Option<&Dataset>,
    sat: &SatConfig,
    sgd: &SgdConfig,
    opts: &LoopOptions,
) -> Result<(TargetStore, Vec<SupervisedEpoch>)> {
    sat.validate()?;
    sgd.validate()?;
    check_batch_size(opts.batch_size)?;
    check_dims(model, train, train.classes())?;
    let mut store = TargetStore::from_labels(train.observed_labels(), train.classes(), sat.alpha)?;
    let weighting = if sat.reweight {
        Weighting::MaxTarget
    } else {
        Weighting::Uniform
    };
    let sce = match sat.loss {
        SatLoss::Sat => None,
        SatLoss::SatSce(w) => Some(w),
    };
    let mut opt = Sgd::from_config(sgd);
    let mut rng = rng::seeded(opts.seed, streams::SHUFFLE);
    let mut report = Vec::with_capacity(sgd.epochs);
    for epoch in 0..sgd.epochs {
        let lr = sgd.lr_at(epoch)?;
        let update_targets = epoch >= sat.start_epoch;
        let mut total = 0.0;
        let batches = epoch_batches(train.len(), opts.batch_size, &mut rng);
        for idx in &batches {
            let xb = train.inputs().select_rows(idx);
            let mut tape = crate::autodiff::Tape::new();
            let x = tape.leaf(&xb)?;
            let (out, leaves) = model.forward_tape(&mut tape, x)?;
            if update_targets {
                let p = softmax_rows(tape.value(out))?;
                for (r, &i) in idx.iter().enumerate() {
                    store.ema_update(i, p.row(r))?;
                }
            }
            let targets = store.targets().select_rows(idx);
            let obj = Objective::SoftCrossEntropy {
                targets,
                weighting,
                sce,
            };
            let loss = tape.loss(out, obj)?;
            let grads = tape.backward(loss)?;
            model.accumulate_grads(&grads, &leaves)?;
            opt.step_model(model, lr)?;
            total += tape.scalar(loss);
        }
        let loss = total / batches.len() as f64;
        report.push(epoch_metrics(model, train, val, &store, epoch, lr, loss)?);
    }
    Ok((store, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;
    use crate::noise::inject_label_noise_uniform;
    use proptest::prelude::*;

    #[test]
    fn init_copies_labels() {
        let y = Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        let s = TargetStore::init_targets(&y, 0.9).unwrap();
        assert_eq!(s.targets(), &y);
        let bad = Tensor::from_rows(&[vec![1.0, 1.0, 0.0]]).unwrap();
        assert!(TargetStore::init_targets(&bad, 0.9).is_err());
        assert!(TargetStore::init_targets(&y, 1.0).is_err());
    }

    #[test]
    fn ema_examples() {
        let mut s = TargetStore::from_labels(&[0], 2, 0.9).unwrap();
        let row = s.ema_update(0, &[0.6, 0.4]).unwrap().to_vec();
        assert!((row[0] - 0.96).abs() < 1e-15 && (row[1] - 0.04).abs() < 1e-15);
        assert!(s.ema_update(1, &[0.5, 0.5]).is_err());
        // Fixed point.
        let mut s = TargetStore::from_labels(&[1], 2, 0.9).unwrap();
        s.ema_update(0, &[0.0, 1.0]).unwrap();
        assert_eq!(s.row(0), &[0.0, 1.0]);
    }

    #[test]
    fn geometric_convergence() {
        let alpha: f64 = 0.9;
        let p = [0.2, 0.5, 0.3];
        let mut s = TargetStore::from_labels(&[0], 3, alpha).unwrap();
        let dist = |t: &[f64]| libm::sqrt(t.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum());
        let d0 = dist(s.row(0));
        for k in 1..=30 {
            s.ema_update(0, &p).unwrap();
            let expect = libm::pow(alpha, k as f64) * d0;
            assert!((dist(s.row(0)) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn crossing_point_after_log_half_updates() {
        // Constant one-hot predictions for class 1 overturn a class-0 target
        // at the first k with α^k < 1/2.
        for alpha in [0.5, 0.7, 0.9, 0.99] {
            let k = libm::floor(libm::log(0.5) / libm::log(alpha)) as usize + 1;
            let mut s = TargetStore::from_labels(&[0], 2, alpha).unwrap();
            for step in 1..=k {
                s.ema_update(0, &[0.0, 1.0]).unwrap();
                let want = if step < k { 0 } else { 1 };
                assert_eq!(argmax(s.row(0)), want, "alpha {alpha} step {step}");
            }
        }
    }

    #[test]
    fn width_schedule_examples() {
        assert_eq!(width_schedule(64).unwrap(), (40, 0.9));
        let (es, a) = width_schedule(32).unwrap();
        assert_eq!(es, 80);
        assert!((a - libm::sqrt(0.9)).abs() < 1e-15);
        assert!((a - 0.94868).abs() < 1e-5);
        let (es, a) = width_schedule(128).unwrap();
        assert_eq!(es, 20);
        assert!((a - 0.81).abs() < 1e-12);
    }

    #[test]
    fn recovery_examples() {
        let s = TargetStore::from_labels(&[0, 1, 2, 1], 3, 0.9).unwrap();
        let (acc, conf) = recovery_metrics(&s, &[0, 1, 2, 1]).unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(conf, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
        // Uniform rows resolve to class 0.
        let mut s = TargetStore::from_labels(&[2], 3, 0.5).unwrap();
        for _ in 0..60 {
            s.ema_update(0, &[1.0 / 3.0; 3]).unwrap();
        }
        let uniform = TargetStore {
            targets: Tensor::matrix(1, 3, vec![1.0 / 3.0; 3]).unwrap(),
            alpha: 0.5,
        };
        assert_eq!(uniform.recovered_labels(), [0]);
    }

    #[test]
    fn weight_matrix_examples() {
        let s = TargetStore::from_labels(&[0, 1], 2, 0.9).unwrap();
        let m = mean_weight_matrix(&s, &[0, 1]).unwrap();
        assert_eq!(m, vec![vec![Some(1.0), None], vec![None, Some(1.0)]]);
        let s = TargetStore {
            targets: Tensor::matrix(1, 2, vec![0.6, 0.4]).unwrap(),
            alpha: 0.9,
        };
        let m = mean_weight_matrix(&s, &[0]).unwrap();
        assert_eq!(m[0][0], Some(0.6));
        assert_eq!(m[0][1], None);
    }

    fn small_problem(seed: u64) -> (Dataset, Dataset) {
        let ds = gen_blobs(4, 60, 6, 0.4, seed).unwrap();
        let ds = inject_label_noise_uniform(&ds, 0.3, seed + 1).unwrap();
        crate::data::split_train_val(&ds, 200).unwrap()
    }

    #[test]
    fn late_start_is_bitwise_erm() {
        let (train, val) = small_problem(3);
        let sgd = SgdConfig {
            lr: 0.05,
            epochs: 6,
            ..SgdConfig::default()
        };
        let opts = LoopOptions {
            batch_size: 32,
            seed: 5,
        };
        let mut erm = Mlp::seeded(&[6, 16, 4], 8).unwrap();
        let (_, erm_report) = train_erm(&mut erm, &train, Some(&val), &sgd, &opts).unwrap();
        for reweight in [false, true] {
            let sat = SatConfig {
                start_epoch: 6,
                alpha: 0.9,
                loss: SatLoss::Sat,
                reweight,
            };
            let mut m = Mlp::seeded(&[6, 16, 4], 8).unwrap();
            let (store, report) =
                train_supervised(&mut m, &train, Some(&val), &sat, &sgd, &opts).unwrap();
            assert_eq!(m, erm);
            assert_eq!(report, erm_report);
            assert_eq!(store.targets(), &train.one_hot_observed());
        }
    }

    #[test]
    fn deterministic_runs() {
        let (train, val) = small_problem(4);
        let sgd = SgdConfig {
            lr: 0.05,
            epochs: 4,
            ..SgdConfig::default()
        };
        let opts = LoopOptions {
            batch_size: 16,
            seed: 1,
        };
        let sat = SatConfig {
            start_epoch: 1,
            ..SatConfig::for_epochs(4)
        };
        let run = || {
            let mut m = Mlp::seeded(&[6, 8, 4], 2).unwrap();
            let (s, r) = train_supervised(&mut m, &train, Some(&val), &sat, &sgd, &opts).unwrap();
            (m, s, r)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn targets_stay_distributions_in_training() {
        let (train, _) = small_problem(6);
        let sgd = SgdConfig {
            lr: 0.05,
            epochs: 5,
            ..SgdConfig::default()
        };
        let opts = LoopOptions {
            batch_size: 16,
            seed: 1,
        };
        let sat = SatConfig {
            start_epoch: 0,
            ..SatConfig::for_epochs(5)
        };
        let mut m = Mlp::seeded(&[6, 8, 4], 2).unwrap();
        let (store, report) = train_supervised(&mut m, &train, None, &sat, &sgd, &opts).unwrap();
        assert_eq!(report.len(), 5);
        for row in store.targets().row_iter() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (train, _) = small_problem(7);
        let mut m = Mlp::seeded(&[5, 8, 4], 2).unwrap();
        let sgd = SgdConfig {
            epochs: 1,
            ..SgdConfig::default()
        };
        let opts = LoopOptions {
            batch_size: 16,
            seed: 1,
        };
        let r = train_supervised(&mut m, &train, None, &SatConfig::for_epochs(1), &sgd, &opts);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn ema_keeps_probability_vectors(
            alpha in 0.01f64..0.99,
            y in 0usize..5,
            preds in proptest::collection::vec(proptest::collection::vec(-8.0f64..8.0, 5), 1..80),
        ) {
            let mut s = TargetStore::from_labels(&[y], 5, alpha).unwrap();
            for logits in preds {
                let p = softmax_rows(&Tensor::matrix(1, 5, logits).unwrap()).unwrap();
                s.ema_update(0, p.data()).unwrap();
                let row = s.row(0);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&x| x >= 0.0));
                let w = sample_weight(row);
                prop_assert!((0.2 - 1e-12..=1.0 + 1e-12).contains(&w));
            }
        }

        #[test]
        fn target_update_never_raises_ce_toward_self_entropy(
            t_logits in proptest::collection::vec(-4.0f64..4.0, 4),
            p_logits in proptest::collection::vec(-4.0f64..4.0, 4),
            alpha in 0.05f64..0.95,
        ) {
            // For fixed p, moving t toward p changes −Σ t log p linearly toward
            // the entropy of p, which is the minimum of −Σ q log p over q only
            // when q = p; check the value lands between the two endpoints.
            let t = softmax_rows(&Tensor::matrix(1, 4, t_logits).unwrap()).unwrap();
            let p = softmax_rows(&Tensor::matrix(1, 4, p_logits).unwrap()).unwrap();
            let ce = |q: &[f64]| -q.iter().zip(p.data()).map(|(a, b)| a * libm::log(*b)).sum::<f64>();
            let mut s = TargetStore { targets: t.clone(), alpha };
            let before = ce(t.data());
            let after = ce(s.ema_update(0, p.data()).unwrap());
            let floor = ce(p.data());
            let (lo, hi) = if before < floor { (before, floor) } else { (floor, before) };
            prop_assert!(after >= lo - 1e-12 && after <= hi + 1e-12);
        }
    }
}
