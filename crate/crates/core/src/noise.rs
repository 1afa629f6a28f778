//! Corruption schemes for labels and inputs.
//!
//! Every scheme selects each sample independently with probability `p` from
//! a seeded stream, never touches the clean labels, and records the affected
//! samples in the dataset's corruption mask.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::rng::{self, streams, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Selected labels redrawn uniformly over all classes (true class included).
    CorruptedLabels,
    /// Selected inputs replaced by Gaussian draws with the per-feature statistics.
    GaussianInputs,
    /// Selected inputs permuted by a fresh permutation each.
    RandomPixels,
    /// Selected inputs permuted by one permutation shared across the call.
    ShuffledPixels,
    /// Same mechanism as [`Scheme::CorruptedLabels`].
    SymmetricLabels,
    /// Selected labels moved to the next class, wrapping around.
    AsymmetricCircular,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::CorruptedLabels,
        Scheme::GaussianInputs,
        Scheme::RandomPixels,
        Scheme::ShuffledPixels,
        Scheme::SymmetricLabels,
        Scheme::AsymmetricCircular,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::CorruptedLabels => "corrupted_labels",
            Scheme::GaussianInputs => "gaussian_inputs",
            Scheme::RandomPixels => "random_pixels",
            Scheme::ShuffledPixels => "shuffled_pixels",
            Scheme::SymmetricLabels => "symmetric_labels",
            Scheme::AsymmetricCircular => "asymmetric_circular",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    pub scheme: Scheme,
    pub rate: f64,
    pub seed: u64,
}

/// Result of applying a [`CorruptionSpec`]; `permutation` is set for the
/// shared-permutation scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct Corrupted {
    pub dataset: Dataset,
    pub permutation: Option<Vec<usize>>,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        check_rate(self.rate)?;
        if self.scheme == Scheme::AsymmetricCircular && self.rate > 0.5 {
            return Err(invalid(
                "rate",
                "circular flipping is defined for rates up to 0.5",
            ));
        }
        Ok(())
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Corrupted> {
        self.validate()?;
        let (p, seed) = (self.rate, self.seed);
        let mut permutation = None;
        let dataset = match self.scheme {
            Scheme::CorruptedLabels | Scheme::SymmetricLabels => {
                inject_label_noise_uniform(ds, p, seed)?
            }
            Scheme::AsymmetricCircular => inject_label_noise_asymmetric_circular(ds, p, seed)?,
            Scheme::GaussianInputs => replace_gaussian(ds, p, seed)?,
            Scheme::RandomPixels => permute_features_per_sample(ds, p, seed)?,
            Scheme::ShuffledPixels => {
                let (d, perm) = permute_features_fixed(ds, p, seed)?;
                permutation = Some(perm);
                d
            }
        };
        Ok(Corrupted {
            dataset,
            permutation,
        })
    }
}

fn check_rate(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid("rate", format!("{p} outside [0, 1]")));
    }
    Ok(())
}

fn selected(rng: &mut Rng, p: f64) -> bool {
    rng.random_bool(p)
}

/// Each sample independently, with probability `p`, gets a label drawn
/// uniformly over all classes. The wrong-label fraction is ≈ `p·(c−1)/c`.
pub fn inject_label_noise_uniform(ds: &Dataset, p: f64, seed: u64) -> Result<Dataset> {
    check_rate(p)?;
    let mut rng = rng::seeded(seed, streams::NOISE);
    let mut out = ds.clone();
    let c = ds.classes();
    for i in 0..ds.len() {
        if selected(&mut rng, p) {
            let y = rng.random_range(0..c);
            out.set_observed(i, y);
        }
    }
    Ok(out)
}

/// Each sample independently, with probability `p ≤ 0.5`, is relabelled
/// `(y + 1) mod c`.
pub fn inject_label_noise_asymmetric_circular(ds: &Dataset, p: f64, seed: u64) -> Result<Dataset> {
    check_rate(p)?;
    if p > 0.5 {
        return Err(invalid(
            "rate",
            "circular flipping is defined for rates up to 0.5",
        ));
    }
    let mut rng = rng::seeded(seed, streams::NOISE);
    let mut out = ds.clone();
    let c = ds.classes();
    for i in 0..ds.len() {
        if selected(&mut rng, p) {
            out.set_observed(i, (ds.observed_labels()[i] + 1) % c);
        }
    }
    Ok(out)
}

/// Flips sample `i` to the next class unconditionally.
pub fn flip_circular(ds: &Dataset, i: usize) -> Dataset {
    let mut out = ds.clone();
    out.set_observed(i, (ds.observed_labels()[i] + 1) % ds.classes());
    out
}

/// Selected inputs are replaced by independent draws from
/// `N(mean_j, std_j²)` per feature; labels are unchanged.
pub fn replace_gaussian(ds: &Dataset, p: f64, seed: u64) -> Result<Dataset> {
    check_rate(p)?;
    let mut rng = rng::seeded(seed, streams::NOISE);
    let mut out = ds.clone();
    let (mean, std) = (ds.feature_mean().to_vec(), ds.feature_std().to_vec());
    for i in 0..ds.len() {
        if selected(&mut rng, p) {
            let row = out.inputs_mut().row_mut(i);
            for ((x, mu), sd) in row.iter_mut().zip(&mean).zip(&std) {
                *x = mu + sd * rng::normal(&mut rng);
            }
            out.mark(i);
        }
    }
    Ok(out)
}

fn check_dim(ds: &Dataset) -> Result<()> {
    if ds.dim() < 2 {
        return Err(invalid(
            "dim",
            "permutation schemes need at least 2 features",
        ));
    }
    Ok(())
}

/// Selected inputs are permuted, each by its own uniform permutation.
pub fn permute_features_per_sample(ds: &Dataset, p: f64, seed: u64) -> Result<Dataset> {
    check_rate(p)?;
    check_dim(ds)?;
    let mut rng = rng::seeded(seed, streams::NOISE);
    let mut out = ds.clone();
    let mut perm: Vec<usize> = (0..ds.dim()).collect();
    for i in 0..ds.len() {
        if selected(&mut rng, p) {
            perm.shuffle(&mut rng);
            let src = ds.inputs().row(i);
            let row = out.inputs_mut().row_mut(i);
            for (dst, &j) in row.iter_mut().zip(&perm) {
                *dst = src[j];
            }
            out.mark(i);
        }
    }
    Ok(out)
}

/// Draws one uniform permutation and applies it to every selected input.
/// Returns the permutation: corrupted row `r'` satisfies `r'[k] = r[perm[k]]`.
pub fn permute_features_fixed(ds: &Dataset, p: f64, seed: u64) -> Result<(Dataset, Vec<usize>)> {
    check_rate(p)?;
    check_dim(ds)?;
    let mut rng = rng::seeded(seed, streams::NOISE);
    let mut perm: Vec<usize> = (0..ds.dim()).collect();
    perm.shuffle(&mut rng);
    let mut out = ds.clone();
    for i in 0..ds.len() {
        if selected(&mut rng, p) {
            let src = ds.inputs().row(i);
            let row = out.inputs_mut().row_mut(i);
            for (dst, &j) in row.iter_mut().zip(&perm) {
                *dst = src[j];
            }
            out.mark(i);
        }
    }
    Ok((out, perm))
}

/// Inverse of a permutation as returned by [`permute_features_fixed`].
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = alloc::vec![0; perm.len()];
    for (k, &j) in perm.iter().enumerate() {
        inv[j] = k;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;

    fn blobs(m_per_class: usize, c: usize) -> Dataset {
        gen_blobs(c, m_per_class, 8, 0.5, 3).unwrap()
    }

    #[test]
    fn zero_rate_is_identity() {
        let ds = blobs(20, 4);
        for scheme in Scheme::ALL {
            let out = CorruptionSpec {
                scheme,
                rate: 0.0,
                seed: 1,
            }
            .apply(&ds)
            .unwrap();
            assert_eq!(out.dataset.inputs(), ds.inputs(), "{scheme:?}");
            assert_eq!(out.dataset.observed_labels(), ds.observed_labels());
            assert!(out.dataset.mask().iter().all(|&b| !b));
        }
    }

    #[test]
    fn clean_labels_never_change() {
        let ds = blobs(30, 5);
        for scheme in Scheme::ALL {
            let out = CorruptionSpec {
                scheme,
                rate: 0.5,
                seed: 9,
            }
            .apply(&ds)
            .unwrap();
            assert_eq!(out.dataset.clean_labels(), ds.clean_labels());
        }
    }

    #[test]
    fn uniform_full_rate_wrong_fraction() {
        let ds = gen_blobs(10, 1000, 2, 0.1, 1).unwrap();
        let out = inject_label_noise_uniform(&ds, 1.0, 5).unwrap();
        let wrong = out.wrong_label_fraction();
        assert!((wrong - 0.9).abs() <= 0.02, "{wrong}");
        let out = inject_label_noise_uniform(&ds, 0.4, 5).unwrap();
        let wrong = out.wrong_label_fraction();
        assert!((wrong - 0.36).abs() <= 0.02, "{wrong}");
        // Mask marks exactly the disagreements for label schemes.
        for i in 0..out.len() {
            assert_eq!(
                out.mask()[i],
                out.clean_labels()[i] != out.observed_labels()[i]
            );
        }
    }

    #[test]
    fn circular_flip() {
        let ds = Dataset::new(crate::Tensor::zeros(&[1, 2]), alloc::vec![3], 4).unwrap();
        assert_eq!(flip_circular(&ds, 0).observed_labels(), [0]);
        let big = gen_blobs(10, 1000, 2, 0.1, 2).unwrap();
        let out = inject_label_noise_asymmetric_circular(&big, 0.4, 3).unwrap();
        assert!((out.wrong_label_fraction() - 0.4).abs() <= 0.02);
        for i in 0..out.len() {
            if out.mask()[i] {
                assert_eq!(out.observed_labels()[i], (out.clean_labels()[i] + 1) % 10);
            }
        }
        assert!(inject_label_noise_asymmetric_circular(&big, 0.6, 3).is_err());
    }

    #[test]
    fn rate_out_of_range() {
        let ds = blobs(5, 2);
        assert!(inject_label_noise_uniform(&ds, 1.5, 0).is_err());
        assert!(replace_gaussian(&ds, -0.1, 0).is_err());
    }

    #[test]
    fn per_sample_permutation_preserves_multiset() {
        let ds = blobs(10, 3);
        let out = permute_features_per_sample(&ds, 1.0, 4).unwrap();
        for i in 0..ds.len() {
            let mut a = ds.inputs().row(i).to_vec();
            let mut b = out.inputs().row(i).to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn fixed_permutation_inverts() {
        let ds = blobs(10, 3);
        let (out, perm) = permute_features_fixed(&ds, 0.7, 4).unwrap();
        let inv = invert_permutation(&perm);
        for i in 0..ds.len() {
            let row = out.inputs().row(i);
            if out.mask()[i] {
                let expect: Vec<f64> = perm.iter().map(|&j| ds.inputs().row(i)[j]).collect();
                assert_eq!(row, &expect[..]);
                let restored: Vec<f64> = inv.iter().map(|&k| row[k]).collect();
                assert_eq!(restored, ds.inputs().row(i));
            } else {
                assert_eq!(row, ds.inputs().row(i));
            }
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let ds = blobs(10, 3);
        for scheme in Scheme::ALL {
            let a = CorruptionSpec {
                scheme,
                rate: 0.4,
                seed: 12,
            }
            .apply(&ds)
            .unwrap();
            let b = CorruptionSpec {
                scheme,
                rate: 0.4,
                seed: 12,
            }
            .apply(&ds)
            .unwrap();
            assert_eq!(a, b);
        }
    }
}
