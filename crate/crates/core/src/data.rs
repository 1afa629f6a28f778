//! Labelled datasets and the Gaussian blob generator.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{invalid, Error, Result};
use crate::rng::{self, streams};
use crate::tensor::{self, Tensor};

/// Inputs with clean and observed class labels.
///
/// Labels are stored as class indices; [`Dataset::one_hot_clean`] and
/// [`Dataset::one_hot_observed`] give the one-hot matrices. `mask[i]` is true
/// when sample `i` was corrupted (label flipped or input replaced/permuted).
/// Feature statistics describe the original input distribution and are
/// carried unchanged through corruption and splitting.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    classes: usize,
    clean: Vec<usize>,
    observed: Vec<usize>,
    mask: Vec<bool>,
    feature_mean: Vec<f64>,
    feature_std: Vec<f64>,
}

impl Dataset {
    /// Uncorrupted dataset; statistics are computed from `inputs`.
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let (m, _) = inputs.dims2()?;
        if labels.len() != m {
            return Err(Error::Shape(format!(
                "{m} inputs but {} labels",
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(invalid("classes", "need at least 2 classes"));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::IndexOutOfRange {
                index: y,
                len: classes,
            });
        }
        let (feature_mean, feature_std) = feature_stats(&inputs);
        Ok(Self {
            inputs,
            classes,
            observed: labels.clone(),
            clean: labels,
            mask: vec![false; m],
            feature_mean,
            feature_std,
        })
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn clean_labels(&self) -> &[usize] {
        &self.clean
    }

    pub fn observed_labels(&self) -> &[usize] {
        &self.observed
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn feature_mean(&self) -> &[f64] {
        &self.feature_mean
    }

    pub fn feature_std(&self) -> &[f64] {
        &self.feature_std
    }

    pub fn corrupted_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Fraction of samples whose observed label differs from the clean one.
    pub fn wrong_label_fraction(&self) -> f64 {
        let wrong = self
            .clean
            .iter()
            .zip(&self.observed)
            .filter(|(a, b)| a != b)
            .count();
        wrong as f64 / self.len() as f64
    }

    pub fn one_hot_clean(&self) -> Tensor {
        one_hot(&self.clean, self.classes)
    }

    pub fn one_hot_observed(&self) -> Tensor {
        one_hot(&self.observed, self.classes)
    }

    pub(crate) fn inputs_mut(&mut self) -> &mut Tensor {
        &mut self.inputs
    }

    pub(crate) fn set_observed(&mut self, i: usize, y: usize) {
        self.observed[i] = y;
        self.mask[i] |= self.clean[i] != y;
    }

    pub(crate) fn mark(&mut self, i: usize) {
        self.mask[i] = true;
    }

    fn subset(&self, range: core::ops::Range<usize>) -> Self {
        let idx: Vec<usize> = range.clone().collect();
        Self {
            inputs: self.inputs.select_rows(&idx),
            classes: self.classes,
            clean: self.clean[range.clone()].to_vec(),
            observed: self.observed[range.clone()].to_vec(),
            mask: self.mask[range].to_vec(),
            feature_mean: self.feature_mean.clone(),
            feature_std: self.feature_std.clone(),
        }
    }
}

/// `m×c` one-hot matrix for class indices.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        t.row_mut(i)[y] = 1.0;
    }
    t
}

/// Class index of each row, requiring exactly one unit entry and zeros elsewhere.
pub fn labels_from_one_hot(t: &Tensor) -> Result<Vec<usize>> {
    t.dims2()?;
    t.row_iter()
        .enumerate()
        .map(|(i, row)| {
            let ones = row.iter().filter(|&&x| x == 1.0).count();
            let zeros = row.iter().filter(|&&x| x == 0.0).count();
            if ones == 1 && zeros == row.len() - 1 {
                Ok(tensor::argmax(row))
            } else {
                Err(Error::MalformedLabel {
                    row: i,
                    reason: format!("{row:?} is not one-hot"),
                })
            }
        })
        .collect()
}

fn feature_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (m, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for row in x.row_iter() {
        mean.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    let mut var = vec![0.0; d];
    for row in x.row_iter() {
        for ((s, v), mu) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - mu) * (v - mu);
        }
    }
    let std = var.into_iter().map(|s| libm::sqrt(s / m as f64)).collect();
    (mean, std)
}

/// Isotropic Gaussian blobs: `per_class` samples for each of `classes` means,
/// `x = μ_y + spread·ε` with `ε ~ N(0, I)`.
///
/// Class means are a seeded random orthonormal frame (Gram–Schmidt on Gaussian
/// draws; plain random unit directions when `classes > dim`) scaled by √2, so
/// distinct means sit at distance 2 and each mean is at unit distance from the
/// pairwise bisecting hyperplanes. Sample order is shuffled so that index
/// prefixes are class-balanced in expectation.
pub fn gen_blobs(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(invalid("classes", "need at least 2 classes"));
    }
    if per_class == 0 {
        return Err(invalid("per_class", "need at least one sample per class"));
    }
    if dim < 2 {
        return Err(invalid("dim", "need at least 2 features"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(invalid(
            "spread",
            format!("{spread} must be finite and non-negative"),
        ));
    }
    let mut rng = rng::seeded(seed, streams::BLOBS);
    let means = class_means(classes, dim, &mut rng);
    let m = classes * per_class;
    let mut order: Vec<usize> = (0..m).map(|i| i % classes).collect();
    order.shuffle(&mut rng);
    let mut data = Vec::with_capacity(m * dim);
    for &y in &order {
        for j in 0..dim {
            data.push(means[y * dim + j] + spread * rng::normal(&mut rng));
        }
    }
    Dataset::new(Tensor::matrix(m, dim, data)?, order, classes)
}

fn class_means(classes: usize, dim: usize, rng: &mut rng::Rng) -> Vec<f64> {
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while frame.len() < classes {
        let mut v: Vec<f64> = (0..dim).map(|_| rng::normal(rng)).collect();
        if classes <= dim {
            for u in &frame {
                let proj = tensor::dot(&v, u);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
            }
        }
        if let Some(u) = tensor::normalized(&v) {
            if tensor::l2_norm(&v) > 1e-6 {
                frame.push(u);
            }
        }
    }
    let scale = core::f64::consts::SQRT_2;
    frame.into_iter().flatten().map(|x| x * scale).collect()
}

/// Deterministic index split: the first `n_train` samples and the rest.
pub fn split_train_val(ds: &Dataset, n_train: usize) -> Result<(Dataset, Dataset)> {
    if n_train == 0 || n_train >= ds.len() {
        return Err(Error::IndexOutOfRange {
            index: n_train,
            len: ds.len(),
        });
    }
    Ok((ds.subset(0..n_train), ds.subset(n_train..ds.len())))
}
