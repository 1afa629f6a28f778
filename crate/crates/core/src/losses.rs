//! Training objectives.
//!
//! Each objective has a plain scalar evaluation (`*_loss` functions, also used
//! as reference values in tests) and an [`Objective`] form that the tape uses to
//! produce the loss value together with its gradient with respect to the
//! network output.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{self, softmax_into, Tensor, NORM_EPS};

/// Lower clamp applied to probabilities before taking logs.
pub const LOG_EPS: f64 = 1e-12;
/// Lower clamp applied to targets inside the reverse cross-entropy term.
pub const SCE_TARGET_CLAMP: f64 = 1e-4;

/// Confidence weight of a soft target: its largest entry.
pub fn sample_weight(target: &[f64]) -> f64 {
    target.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn check_same(p: &Tensor, t: &Tensor) -> Result<(usize, usize)> {
    let (m, c) = p.dims2()?;
    if t.shape() != p.shape() {
        return Err(Error::Shape(format!(
            "predictions {:?} vs targets {:?}",
            p.shape(),
            t.shape()
        )));
    }
    Ok((m, c))
}

/// Coefficients of the symmetric (reverse) cross-entropy term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceWeights {
    pub forward: f64,
    pub reverse: f64,
}

impl Default for SceWeights {
    fn default() -> Self {
        Self {
            forward: 1.0,
            reverse: 0.1,
        }
    }
}

/// How per-sample weights are formed for soft-target cross entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// Every sample counts once.
    Uniform,
    /// `w_i = max_j t_ij`.
    MaxTarget,
}

fn per_sample_ce(p: &[f64], t: &[f64], sce: Option<SceWeights>) -> f64 {
    let forward: f64 = t
        .iter()
        .zip(p)
        .map(|(&tj, &pj)| -tj * libm::log(pj.max(LOG_EPS)))
        .sum();
    match sce {
        None => forward,
        Some(w) => {
            let reverse: f64 = p
                .iter()
                .zip(t)
                .map(|(&pj, &tj)| -pj * libm::log(tj.max(SCE_TARGET_CLAMP)))
                .sum();
            w.forward * forward + w.reverse * reverse
        }
    }
}

fn weights_for(t: &Tensor, weighting: Weighting) -> Vec<f64> {
    match weighting {
        Weighting::Uniform => vec![1.0; t.rows()],
        Weighting::MaxTarget => t.row_iter().map(sample_weight).collect(),
    }
}

/// `−(1/Σw) Σ_i w_i ℓ_i` over probability rows `p` and target rows `t`.
pub fn weighted_cross_entropy(
    p: &Tensor,
    t: &Tensor,
    weighting: Weighting,
    sce: Option<SceWeights>,
) -> Result<f64> {
    check_same(p, t)?;
    let w = weights_for(t, weighting);
    let wsum: f64 = w.iter().sum();
    let total: f64 = p
        .row_iter()
        .zip(t.row_iter())
        .zip(&w)
        .map(|((pr, tr), &wi)| wi * per_sample_ce(pr, tr, sce))
        .sum();
    Ok(total / wsum)
}

/// Confidence-weighted soft cross entropy, normalized by the total weight.
pub fn sat_loss(p: &Tensor, t: &Tensor) -> Result<f64> {
    weighted_cross_entropy(p, t, Weighting::MaxTarget, None)
}

/// Mean symmetric cross entropy `−w1 Σ t log p − w2 Σ p log t̂` with `t̂`
/// clamped below at [`SCE_TARGET_CLAMP`].
pub fn sce_loss(p: &Tensor, t: &Tensor, w1: f64, w2: f64) -> Result<f64> {
    weighted_cross_entropy(
        p,
        t,
        Weighting::Uniform,
        Some(SceWeights {
            forward: w1,
            reverse: w2,
        }),
    )
}

/// Abstention objective over `c + 1` probability columns; the last column is
/// the abstention class and `t_true[i]` is the target mass on `labels[i]`.
pub fn abstain_loss(p: &Tensor, t_true: &[f64], labels: &[usize]) -> Result<f64> {
    let (m, cols) = p.dims2()?;
    check_abstain(m, cols, t_true, labels)?;
    let abstain = cols - 1;
    let total: f64 = p
        .row_iter()
        .zip(t_true.iter().zip(labels))
        .map(|(row, (&t, &y))| {
            -(t * libm::log(row[y].max(LOG_EPS)) + (1.0 - t) * libm::log(row[abstain].max(LOG_EPS)))
        })
        .sum();
    Ok(total / m as f64)
}

fn check_abstain(m: usize, cols: usize, t_true: &[f64], labels: &[usize]) -> Result<()> {
    if cols < 3 {
        return Err(Error::Shape(format!(
            "abstention needs c + 1 ≥ 3 columns, got {cols}"
        )));
    }
    if t_true.len() != m || labels.len() != m {
        return Err(Error::Shape(format!(
            "{m} rows but {} targets and {} labels",
            t_true.len(),
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= cols - 1) {
        return Err(Error::IndexOutOfRange {
            index: y,
            len: cols - 1,
        });
    }
    Ok(())
}

/// Mean squared distance between ℓ2-normalized prediction and target rows.
pub fn ssl_loss(p: &Tensor, t: &Tensor) -> Result<f64> {
    let (m, _) = check_same(p, t)?;
    let mut total = 0.0;
    for (i, (pr, tr)) in p.row_iter().zip(t.row_iter()).enumerate() {
        let pn = tensor::normalized(pr).ok_or(Error::DegenerateRow { row: i })?;
        let tn = tensor::normalized(tr).ok_or(Error::DegenerateRow { row: i })?;
        total += pn
            .iter()
            .zip(&tn)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / m as f64)
}

/// Mean over all elements of `(y − t)²`.
pub fn mse_loss(y: &Tensor, t: &Tensor) -> Result<f64> {
    check_same(y, t)?;
    let n = y.len() as f64;
    Ok(y.data()
        .iter()
        .zip(t.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// A loss attached to the output node of a tape.
///
/// Cross-entropy variants consume raw logits and apply the softmax internally;
/// targets are constants and never receive gradient.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    Mse {
        targets: Tensor,
    },
    SoftCrossEntropy {
        targets: Tensor,
        weighting: Weighting,
        sce: Option<SceWeights>,
    },
    Abstain {
        t_true: Vec<f64>,
        labels: Vec<usize>,
    },
    NormalizedMse {
        targets: Tensor,
    },
}

impl Objective {
    /// Plain cross entropy against one-hot (or soft) targets.
    pub fn cross_entropy(targets: Tensor) -> Self {
        Self::SoftCrossEntropy {
            targets,
            weighting: Weighting::Uniform,
            sce: None,
        }
    }

    /// Number of rows the objective expects from the network output.
    pub fn rows(&self) -> usize {
        match self {
            Self::Mse { targets }
            | Self::SoftCrossEntropy { targets, .. }
            | Self::NormalizedMse { targets } => targets.rows(),
            Self::Abstain { labels, .. } => labels.len(),
        }
    }

    /// Loss value at `output`.
    pub fn value(&self, output: &Tensor) -> Result<f64> {
        match self {
            Self::Mse { targets } => mse_loss(output, targets),
            Self::SoftCrossEntropy {
                targets,
                weighting,
                sce,
            } => {
                let p = tensor::softmax_rows(output)?;
                weighted_cross_entropy(&p, targets, *weighting, *sce)
            }
            Self::Abstain { t_true, labels } => {
                abstain_loss(&tensor::softmax_rows(output)?, t_true, labels)
            }
            Self::NormalizedMse { targets } => ssl_loss(output, targets),
        }
    }

    /// Loss value and `∂loss/∂output`.
    pub fn value_and_grad(&self, output: &Tensor) -> Result<(f64, Vec<f64>)> {
        let (m, c) = output.dims2()?;
        let value = self.value(output)?;
        let mut grad = vec![0.0; m * c];
        match self {
            Self::Mse { targets } => {
                let scale = 2.0 / (m * c) as f64;
                for ((g, y), t) in grad.iter_mut().zip(output.data()).zip(targets.data()) {
                    *g = scale * (y - t);
                }
            }
            Self::SoftCrossEntropy {
                targets,
                weighting,
                sce,
            } => {
                let w = weights_for(targets, *weighting);
                let wsum: f64 = w.iter().sum();
                let w1 = sce.map_or(1.0, |s| s.forward);
                let mut p = vec![0.0; c];
                let mut coef = vec![0.0; c];
                for i in 0..m {
                    softmax_into(output.row(i), &mut p);
                    let s = w[i] / wsum;
                    let t = targets.row(i);
                    let g = &mut grad[i * c..(i + 1) * c];
                    for j in 0..c {
                        coef[j] = if p[j] > LOG_EPS { -s * w1 * t[j] } else { 0.0 };
                    }
                    log_softmax_pullback(&p, &coef, g);
                    if let Some(sce) = sce {
                        let a: Vec<f64> = t
                            .iter()
                            .map(|&tj| libm::log(tj.max(SCE_TARGET_CLAMP)))
                            .collect();
                        let mean_a = tensor::dot(&p, &a);
                        for j in 0..c {
                            g[j] += -s * sce.reverse * p[j] * (a[j] - mean_a);
                        }
                    }
                }
            }
            Self::Abstain { t_true, labels } => {
                check_abstain(m, c, t_true, labels)?;
                let abstain = c - 1;
                let inv_m = 1.0 / m as f64;
                let mut p = vec![0.0; c];
                let mut coef = vec![0.0; c];
                for i in 0..m {
                    softmax_into(output.row(i), &mut p);
                    coef.iter_mut().for_each(|x| *x = 0.0);
                    let y = labels[i];
                    if p[y] > LOG_EPS {
                        coef[y] = -inv_m * t_true[i];
                    }
                    if p[abstain] > LOG_EPS {
                        coef[abstain] = -inv_m * (1.0 - t_true[i]);
                    }
                    log_softmax_pullback(&p, &coef, &mut grad[i * c..(i + 1) * c]);
                }
            }
            Self::NormalizedMse { targets } => {
                let inv_m = 1.0 / m as f64;
                for i in 0..m {
                    let row = output.row(i);
                    let r = tensor::l2_norm(row);
                    if r <= NORM_EPS {
                        return Err(Error::DegenerateRow { row: i });
                    }
                    let t = tensor::normalized(targets.row(i))
                        .ok_or(Error::DegenerateRow { row: i })?;
                    let u: Vec<f64> = row.iter().map(|x| x / r).collect();
                    let gu: Vec<f64> = u
                        .iter()
                        .zip(&t)
                        .map(|(a, b)| 2.0 * inv_m * (a - b))
                        .collect();
                    let proj = tensor::dot(&u, &gu);
                    for (j, g) in grad[i * c..(i + 1) * c].iter_mut().enumerate() {
                        *g = (gu[j] - u[j] * proj) / r;
                    }
                }
            }
        }
        Ok((value, grad))
    }
}

/// Gradient of `Σ_j coef_j · log softmax(z)_j` with respect to `z`, written into `out`.
fn log_softmax_pullback(p: &[f64], coef: &[f64], out: &mut [f64]) {
    let total: f64 = coef.iter().sum();
    for ((o, &cj), &pj) in out.iter_mut().zip(coef).zip(p) {
        *o = cj - pj * total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn sample_weight_examples() {
        assert_eq!(sample_weight(&[0.0, 1.0, 0.0]), 1.0);
        assert!((sample_weight(&[0.1; 10]) - 0.1).abs() < 1e-15);
        assert_eq!(sample_weight(&[0.3, 0.7]), 0.7);
    }

    #[test]
    fn sat_loss_reduces_to_cross_entropy_for_one_hot() {
        let p = mat(&[&[0.2, 0.7, 0.1]]);
        let t = mat(&[&[0.0, 1.0, 0.0]]);
        assert!((sat_loss(&p, &t).unwrap() + libm::log(0.7)).abs() < 1e-15);
        let p = mat(&[&[1e-9, 1.0 - 1e-9]]);
        let t = mat(&[&[0.0, 1.0]]);
        assert!(sat_loss(&p, &t).unwrap() < 1e-8);
    }

    #[test]
    fn sat_loss_two_sample_hand_value() {
        let p = mat(&[&[0.8, 0.2], &[0.8, 0.2]]);
        let t = mat(&[&[1.0, 0.0], &[0.5, 0.5]]);
        let l08 = libm::log(0.8);
        let l02 = libm::log(0.2);
        // Scalar reference: weights 1 and 0.5.
        let expected = (1.0 * (-l08) + 0.5 * (-0.5 * l08 - 0.5 * l02)) / 1.5;
        assert!((sat_loss(&p, &t).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn sce_examples() {
        let p = mat(&[&[0.7, 0.3]]);
        let t = mat(&[&[1.0, 0.0]]);
        let ce = -libm::log(0.7);
        assert!((sce_loss(&p, &t, 1.0, 0.0).unwrap() - ce).abs() < 1e-15);
        let reverse = sce_loss(&p, &t, 0.0, 0.1).unwrap();
        assert!((reverse - (-0.1 * 0.3 * libm::log(1e-4))).abs() < 1e-15);
        // Exact one-hot agreement: the clamped log(t) terms meet zero mass.
        let p = mat(&[&[1.0, 0.0]]);
        assert_eq!(sce_loss(&p, &t, 0.0, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn abstain_examples() {
        let p = mat(&[&[0.1, 0.5, 0.4]]);
        assert!((abstain_loss(&p, &[1.0], &[1]).unwrap() + libm::log(0.5)).abs() < 1e-15);
        assert!((abstain_loss(&p, &[0.0], &[1]).unwrap() + libm::log(0.4)).abs() < 1e-15);
        let p = mat(&[&[0.2, 0.4, 0.4]]);
        assert!((abstain_loss(&p, &[0.5], &[1]).unwrap() + libm::log(0.4)).abs() < 1e-15);
        assert!(matches!(
            abstain_loss(&p, &[0.5], &[2]),
            Err(Error::IndexOutOfRange { index: 2, len: 2 })
        ));
    }

    #[test]
    fn ssl_loss_examples() {
        let t = mat(&[&[1.0, 0.0]]);
        assert!(ssl_loss(&mat(&[&[3.0, 0.0]]), &t).unwrap().abs() < 1e-15);
        assert!((ssl_loss(&mat(&[&[0.0, 2.0]]), &t).unwrap() - 2.0).abs() < 1e-15);
        assert!((ssl_loss(&mat(&[&[-5.0, 0.0]]), &t).unwrap() - 4.0).abs() < 1e-15);
        assert!(matches!(
            ssl_loss(&mat(&[&[0.0, 0.0]]), &t),
            Err(Error::DegenerateRow { row: 0 })
        ));
    }

    #[test]
    fn ssl_loss_matches_cosine_form() {
        let p = mat(&[&[0.3, -1.2, 2.0], &[1.0, 1.0, 0.5]]);
        let t = mat(&[&[1.0, 0.2, -0.4], &[-0.3, 0.8, 0.1]]);
        let mut expected = 0.0;
        for i in 0..2 {
            let cos = tensor::dot(p.row(i), t.row(i))
                / (tensor::l2_norm(p.row(i)) * tensor::l2_norm(t.row(i)));
            expected += 2.0 - 2.0 * cos;
        }
        assert!((ssl_loss(&p, &t).unwrap() - expected / 2.0).abs() < 1e-12);
    }

    #[test]
    fn abstain_with_full_targets_equals_unit_weight_ce() {
        // Logits over 3 classes + abstention; compare against the c-class
        // one-hot cross entropy evaluated on the same probability columns.
        let p = mat(&[&[0.5, 0.2, 0.2, 0.1], &[0.1, 0.6, 0.1, 0.2]]);
        let labels = [0, 1];
        let a = abstain_loss(&p, &[1.0, 1.0], &labels).unwrap();
        let mut onehot = Tensor::zeros(&[2, 4]);
        onehot.row_mut(0)[0] = 1.0;
        onehot.row_mut(1)[1] = 1.0;
        let ce = weighted_cross_entropy(&p, &onehot, Weighting::Uniform, None).unwrap();
        assert_eq!(a, ce);
    }
}
