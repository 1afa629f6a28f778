//! Cyclic Jacobi eigendecomposition of small dense symmetric matrices.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Off-diagonal tolerance, relative to the Frobenius norm of the input.
pub const OFF_DIAGONAL_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// `M = Vᵀ·diag(values)·V` with the eigenvectors stored as the rows of `vectors`
/// (row-major `n×n`). Eigenvalues are sorted in decreasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEigen {
    pub n: usize,
    pub values: Vec<f64>,
    pub vectors: Vec<f64>,
}

impl SymmetricEigen {
    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.n..(i + 1) * self.n]
    }

    /// `max |V·Vᵀ − I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let n = self.n;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let d: f64 = self
                    .vector(i)
                    .iter()
                    .zip(self.vector(j))
                    .map(|(a, b)| a * b)
                    .sum();
                let e = if i == j { d - 1.0 } else { d };
                worst = worst.max(libm::fabs(e));
            }
        }
        worst
    }

    /// `max |Vᵀ·D·V − m|`.
    pub fn reconstruction_error(&self, m: &[f64]) -> f64 {
        let n = self.n;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let s: f64 = (0..n)
                    .map(|k| self.vectors[k * n + i] * self.values[k] * self.vectors[k * n + j])
                    .sum();
                worst = worst.max(libm::fabs(s - m[i * n + j]));
            }
        }
        worst
    }
}

/// Eigendecomposition of the symmetric `n×n` row-major matrix `m`.
pub fn jacobi_eigen(m: &[f64], n: usize) -> Result<SymmetricEigen> {
    if n == 0 || m.len() != n * n {
        return Err(Error::Shape(format!(
            "{} entries for a {n}×{n} matrix",
            m.len()
        )));
    }
    for i in 0..n {
        for j in 0..i {
            let (a, b) = (m[i * n + j], m[j * n + i]);
            if libm::fabs(a - b) > 1e-12 * (1.0 + libm::fabs(a).max(libm::fabs(b))) {
                return Err(Error::Shape(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let mut a = m.to_vec();
    // Columns of `v` accumulate the rotations: A_final = vᵀ·m·v.
    let mut v = vec![0.0; n * n];
    (0..n).for_each(|i| v[i * n + i] = 1.0);
    let frob = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let tol = OFF_DIAGONAL_TOL * frob;
    for _ in 0..MAX_SWEEPS {
        let off = libm::sqrt(
            (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i * n + j] * a[i * n + j])
                .sum::<f64>(),
        );
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                rotate(&mut a, &mut v, n, p, q);
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order
        .iter()
        .flat_map(|&i| (0..n).map(move |r| (r, i)))
        .map(|(r, i)| v[r * n + i])
        .collect();
    Ok(SymmetricEigen { n, values, vectors })
}

fn rotate(a: &mut [f64], v: &mut [f64], n: usize, p: usize, q: usize) {
    let apq = a[p * n + q];
    if apq == 0.0 {
        return;
    }
    let (app, aqq) = (a[p * n + p], a[q * n + q]);
    let theta = (aqq - app) / (2.0 * apq);
    let t = libm::copysign(1.0, theta) / (libm::fabs(theta) + libm::sqrt(theta * theta + 1.0));
    let c = 1.0 / libm::sqrt(t * t + 1.0);
    let s = t * c;
    for k in 0..n {
        let (akp, akq) = (a[k * n + p], a[k * n + q]);
        a[k * n + p] = c * akp - s * akq;
        a[k * n + q] = s * akp + c * akq;
    }
    for k in 0..n {
        let (apk, aqk) = (a[p * n + k], a[q * n + k]);
        a[p * n + k] = c * apk - s * aqk;
        a[q * n + k] = s * apk + c * aqk;
    }
    a[p * n + q] = 0.0;
    a[q * n + p] = 0.0;
    for k in 0..n {
        let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
        v[k * n + p] = c * vkp - s * vkq;
        v[k * n + q] = s * vkp + c * vkq;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn diagonal_input() {
        let e = jacobi_eigen(&[1.0, 0.0, 0.0, 3.0], 2).unwrap();
        assert_eq!(e.values, [3.0, 1.0]);
        assert_eq!(e.vector(0), [0.0, 1.0]);
    }

    #[test]
    fn two_by_two() {
        // [[2, 1], [1, 2]] has eigenvalues 3 and 1.
        let m = [2.0, 1.0, 1.0, 2.0];
        let e = jacobi_eigen(&m, 2).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-14 && (e.values[1] - 1.0).abs() < 1e-14);
        let v = e.vector(0);
        assert!((libm::fabs(v[0]) - libm::sqrt(0.5)).abs() < 1e-14);
        assert!(e.reconstruction_error(&m) < 1e-14);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(jacobi_eigen(&[1.0, 2.0, 3.0], 2).is_err());
        assert!(jacobi_eigen(&[1.0, 2.0, 0.0, 1.0], 2).is_err());
    }

    proptest! {
        #[test]
        fn decomposes_gram_matrices(n in 1usize..12, entries in proptest::collection::vec(-3.0f64..3.0, 12 * 7)) {
            let k = 7;
            let x = &entries[..n * k];
            let mut g = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    g[i * n + j] = (0..k).map(|l| x[i * k + l] * x[j * k + l]).sum();
                }
            }
            let e = jacobi_eigen(&g, n).unwrap();
            prop_assert!(e.orthogonality_error() <= 1e-10);
            prop_assert!(e.reconstruction_error(&g) <= 1e-8);
            prop_assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(e.values.iter().all(|&l| l > -1e-9));
        }
    }
}
