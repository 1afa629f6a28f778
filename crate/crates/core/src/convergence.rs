//! Alternating least squares with EMA targets on a linear model.
//!
//! Each step takes one gradient step on `½‖Xθ − t‖²` and then moves the
//! targets toward the new fit, `t ← α·t + (1−α)·Xθ`. The residual obeys
//! `Xθ_k − t_k = Vᵀ·A^k·V·b` with `X·Xᵀ = Vᵀ·D·V`, `A = α(I − ηD)` and
//! `b = Xθ_0 − t_0`, so everything about the dynamics can be checked against
//! the spectrum of `X·Xᵀ`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::eigen::{jacobi_eigen, SymmetricEigen};
use crate::error::{invalid, Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    x: Tensor,
    theta: Vec<f64>,
    t: Vec<f64>,
    eta: f64,
    alpha: f64,
    k: usize,
}

impl LinearSystem {
    pub fn new(x: Tensor, theta: Vec<f64>, t: Vec<f64>, eta: f64, alpha: f64) -> Result<Self> {
        let (n, d) = x.dims2()?;
        if theta.len() != d || t.len() != n {
            return Err(Error::Shape(format!(
                "X is {n}×{d} but θ has {} and t has {} entries",
                theta.len(),
                t.len()
            )));
        }
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(invalid(
                "eta",
                format!("{eta} must be finite and non-negative"),
            ));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(invalid("alpha", format!("{alpha} outside (0, 1)")));
        }
        Ok(Self {
            x,
            theta,
            t,
            eta,
            alpha,
            k: 0,
        })
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn targets(&self) -> &[f64] {
        &self.t
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn steps(&self) -> usize {
        self.k
    }

    pub fn with_eta(mut self, eta: f64) -> Result<Self> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(invalid(
                "eta",
                format!("{eta} must be finite and non-negative"),
            ));
        }
        self.eta = eta;
        Ok(self)
    }

    fn fit(&self) -> Vec<f64> {
        let d = self.theta.len();
        self.x
            .data()
            .chunks_exact(d)
            .map(|row| tensor::dot(row, &self.theta))
            .collect()
    }

    /// `Xθ − t`.
    pub fn residual_vector(&self) -> Vec<f64> {
        self.fit().iter().zip(&self.t).map(|(a, b)| a - b).collect()
    }

    /// `‖Xθ − t‖²`.
    pub fn residual(&self) -> f64 {
        self.residual_vector().iter().map(|r| r * r).sum()
    }

    /// One gradient step on θ followed by the target update using the new θ.
    pub fn step(&mut self) {
        let d = self.theta.len();
        let r = self.residual_vector();
        let mut grad = vec![0.0; d];
        for (row, ri) in self.x.data().chunks_exact(d).zip(&r) {
            grad.iter_mut().zip(row).for_each(|(g, x)| *g += x * ri);
        }
        self.theta
            .iter_mut()
            .zip(&grad)
            .for_each(|(p, g)| *p -= self.eta * g);
        let fit = self.fit();
        let a = self.alpha;
        self.t
            .iter_mut()
            .zip(&fit)
            .for_each(|(t, f)| *t = a * *t + (1.0 - a) * f);
        self.k += 1;
    }

    /// `X·Xᵀ` row-major.
    pub fn gram(&self) -> Vec<f64> {
        let (n, d) = (self.t.len(), self.theta.len());
        tensor::matmul_nt(self.x.data(), self.x.data(), n, d, n)
    }
}

/// Functional form of [`LinearSystem::step`].
pub fn alternating_step(sys: &LinearSystem) -> LinearSystem {
    let mut next = sys.clone();
    next.step();
    next
}

/// Spectrum of `X·Xᵀ` together with the contraction factors of the residual.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralData {
    pub eigen: SymmetricEigen,
    /// `a_j = α(1 − η·d_j)`.
    pub a: Vec<f64>,
    /// `b = Xθ_0 − t_0` of the system the data was built from.
    pub b: Vec<f64>,
    /// `V·b`: the components of `b` along each eigenvector.
    pub vb: Vec<f64>,
}

impl SpectralData {
    pub fn of(sys: &LinearSystem) -> Result<Self> {
        let n = sys.t.len();
        let eigen = jacobi_eigen(&sys.gram(), n)?;
        let a = eigen
            .values
            .iter()
            .map(|&dj| sys.alpha * (1.0 - sys.eta * dj))
            .collect();
        let b = sys.residual_vector();
        let vb = (0..n).map(|i| tensor::dot(eigen.vector(i), &b)).collect();
        Ok(Self { eigen, a, b, vb })
    }

    pub fn d_max(&self) -> f64 {
        self.eigen.values[0].max(0.0)
    }
}

/// `Vᵀ·A^k·V·b`.
pub fn closed_form_residual(spectral: &SpectralData, k: usize) -> Vec<f64> {
    let n = spectral.b.len();
    let mut out = vec![0.0; n];
    for (i, (&a, &c)) in spectral.a.iter().zip(&spectral.vb).enumerate() {
        let coef = libm::pow(a, k as f64) * c;
        out.iter_mut()
            .zip(spectral.eigen.vector(i))
            .for_each(|(o, v)| *o += coef * v);
    }
    out
}

/// Largest stable learning rate `(α+1)/(α·d_max)`.
pub fn stable_lr_bound(x: &Tensor, alpha: f64) -> Result<f64> {
    let (n, d) = x.dims2()?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid("alpha", format!("{alpha} outside (0, 1)")));
    }
    if x.data().iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroMatrix);
    }
    let g = tensor::matmul_nt(x.data(), x.data(), n, d, n);
    let d_max = jacobi_eigen(&g, n)?.values[0];
    Ok(bound_from(d_max, alpha))
}

fn bound_from(d_max: f64, alpha: f64) -> f64 {
    (alpha + 1.0) / (alpha * d_max)
}

/// Threshold below which a spectral component of `b` counts as absent.
pub const DEGENERATE_COMPONENT: f64 = 1e-10;
/// Late-ratio measurements stop once the residual falls below this fraction of `r_0`.
pub const RATIO_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct QlinearVerdict {
    pub bound: f64,
    pub eta_over_bound: f64,
    /// `max_j |a_j| ≥ 1`: the learning rate is not below the stable bound.
    pub divergence_expected: bool,
    /// Residual at the last step exceeds `r_0`.
    pub diverged: bool,
    /// Index (into the decreasing eigenvalues) of the largest `|a_j|`.
    pub dominant_index: usize,
    /// Index of the largest `|a_j|` among directions present in `b`.
    pub effective_index: usize,
    /// The largest `|a_j|` belongs to a direction absent from `b`.
    pub degenerate: bool,
    pub a_sq: f64,
    /// `ceil(ln(residual_tol) / (2·ln max|a|))`; `None` when not contracting.
    pub predicted_steps: Option<usize>,
    pub r0: f64,
    /// `r_k` for `k = 0..=steps`.
    pub residuals: Vec<f64>,
    /// `r_{k+1}/r_k` at the last step still above `RATIO_FLOOR·r_0`.
    pub late_ratio: f64,
    pub ratio_step: usize,
    pub residual_ok: bool,
    pub ratio_ok: bool,
}

impl QlinearVerdict {
    pub fn final_residual(&self) -> f64 {
        *self.residuals.last().expect("at least r_0")
    }

    pub fn converged(&self) -> bool {
        !self.divergence_expected && self.residual_ok && self.ratio_ok
    }
}

/// Simulates `k_max` steps and checks the residual against the spectral
/// predictions: `r_{k_max} ≤ residual_tol·r_0` and a late ratio within
/// `ratio_tol` of `a_i²`, where `a_i` is the dominant factor among directions
/// present in `b`. Unstable learning rates yield a divergence verdict.
pub fn verify_qlinear(
    sys: &LinearSystem,
    k_max: usize,
    residual_tol: f64,
    ratio_tol: f64,
) -> Result<QlinearVerdict> {
    if k_max == 0 {
        return Err(invalid("k_max", "at least one step is needed"));
    }
    let spectral = SpectralData::of(sys)?;
    let d_max = spectral.d_max();
    if d_max == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    let bound = bound_from(d_max, sys.alpha);
    let r0 = sys.residual();
    if !(r0 > 0.0) {
        return Err(invalid("residual", "initial residual must be positive"));
    }
    let abs_a: Vec<f64> = spectral.a.iter().map(|a| libm::fabs(*a)).collect();
    let dominant_index = argmax_first(&abs_a, |_| true);
    let scale = libm::sqrt(r0);
    let present = |j: usize| libm::fabs(spectral.vb[j]) >= DEGENERATE_COMPONENT * scale;
    let effective_index = argmax_first(&abs_a, present);
    let a_max = abs_a[dominant_index];
    let a_eff = abs_a[effective_index];
    let divergence_expected = a_max >= 1.0;
    let degenerate = a_eff < a_max;
    let predicted_steps = steps_for(a_max, residual_tol);

    let mut state = sys.clone();
    let mut residuals = Vec::with_capacity(k_max + 1);
    residuals.push(r0);
    for _ in 0..k_max {
        state.step();
        let r = state.residual();
        residuals.push(r);
        if !r.is_finite() || r > 1e250 {
            break;
        }
    }
    let ratio_step = (0..residuals.len() - 1)
        .rev()
        .find(|&k| residuals[k + 1] >= RATIO_FLOOR * r0)
        .unwrap_or(0);
    let late_ratio = residuals[ratio_step + 1] / residuals[ratio_step];
    let a_sq = a_eff * a_eff;
    let last = *residuals.last().expect("r_0");
    Ok(QlinearVerdict {
        bound,
        eta_over_bound: sys.eta / bound,
        divergence_expected,
        diverged: !(last <= r0),
        dominant_index,
        effective_index,
        degenerate,
        a_sq,
        predicted_steps,
        r0,
        residual_ok: last <= residual_tol * r0,
        ratio_ok: libm::fabs(late_ratio - a_sq) <= ratio_tol,
        late_ratio,
        ratio_step,
        residuals,
    })
}

fn steps_for(a_max: f64, residual_tol: f64) -> Option<usize> {
    (a_max < 1.0 && a_max > 0.0)
        .then(|| libm::ceil(libm::log(residual_tol) / (2.0 * libm::log(a_max))).max(0.0) as usize)
}

/// Steps until `max_j a_j^{2k}` falls to `residual_tol`; `None` when the
/// dynamics do not contract.
pub fn predicted_steps(spectral: &SpectralData, residual_tol: f64) -> Option<usize> {
    steps_for(
        spectral
            .a
            .iter()
            .fold(0.0, |m: f64, a| m.max(libm::fabs(*a))),
        residual_tol,
    )
}

/// First index of the largest value among those passing `keep` (0 if none pass).
fn argmax_first(v: &[f64], keep: impl Fn(usize) -> bool) -> usize {
    let mut best: Option<usize> = None;
    for (j, &x) in v.iter().enumerate() {
        if keep(j) && best.is_none_or(|b| x > v[b] * (1.0 + 1e-12)) {
            best = Some(j);
        }
    }
    best.unwrap_or(0)
}

/// How the design matrix of a random system is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Design {
    /// i.i.d. standard normal entries.
    Gaussian,
    /// `U·diag(σ)·Wᵀ` with orthonormal `U`, `W` and `σ ∈ [1, 2]`, so the
    /// nonzero spectrum of `X·Xᵀ` lies in `[1, 4]`.
    WellConditioned,
}

/// Random system with standard normal `θ_0` and `t_0` and learning rate
/// `eta_frac` times the stable bound.
pub fn random_system(
    n: usize,
    d: usize,
    alpha: f64,
    eta_frac: f64,
    design: Design,
    seed: u64,
) -> Result<LinearSystem> {
    if n == 0 || d == 0 {
        return Err(invalid("n, d", "must be positive"));
    }
    let mut rng = rng::seeded(seed, rng::streams::INIT);
    let x = match design {
        Design::Gaussian => Tensor::matrix(n, d, normals(&mut rng, n * d))?,
        Design::WellConditioned => conditioned(n, d, &mut rng)?,
    };
    let theta = normals(&mut rng, d);
    let t = normals(&mut rng, n);
    let bound = stable_lr_bound(&x, alpha)?;
    LinearSystem::new(x, theta, t, eta_frac * bound, alpha)
}

fn normals(rng: &mut Rng, k: usize) -> Vec<f64> {
    (0..k).map(|_| rng::normal(rng)).collect()
}

/// `r` orthonormal vectors of length `len` (as rows), `r ≤ len`.
fn orthonormal_rows(r: usize, len: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(r);
    while rows.len() < r {
        let mut v = normals(rng, len);
        for _ in 0..2 {
            for u in &rows {
                let p = tensor::dot(&v, u);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
        }
        if tensor::l2_norm(&v) > 1e-6 {
            rows.push(tensor::normalized(&v).expect("nonzero"));
        }
    }
    rows
}

fn conditioned(n: usize, d: usize, rng: &mut Rng) -> Result<Tensor> {
    let r = n.min(d);
    let u = orthonormal_rows(r, n, rng);
    let w = orthonormal_rows(r, d, rng);
    let sigma: Vec<f64> = (0..r).map(|_| 1.0 + rng::uniform(rng)).collect();
    let mut x = vec![0.0; n * d];
    for k in 0..r {
        for i in 0..n {
            for j in 0..d {
                x[i * d + j] += u[k][i] * sigma[k] * w[k][j];
            }
        }
    }
    Tensor::matrix(n, d, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_d(eta: f64, alpha: f64) -> LinearSystem {
        LinearSystem::new(
            Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            vec![0.0],
            vec![1.0],
            eta,
            alpha,
        )
        .unwrap()
    }

    #[test]
    fn one_dimensional_step() {
        let s = alternating_step(&one_d(0.5, 0.5));
        assert_eq!(s.theta(), [0.5]);
        assert_eq!(s.targets(), [0.75]);
        assert_eq!(s.residual_vector(), [-0.25]);
        let spec = SpectralData::of(&one_d(0.5, 0.5)).unwrap();
        assert_eq!(spec.a, [0.25]);
        assert_eq!(closed_form_residual(&spec, 1), [-0.25]);
        assert_eq!(closed_form_residual(&spec, 0), [-1.0]);
    }

    #[test]
    fn predicted_steps_reach_tolerance() {
        let spec = SpectralData::of(&one_d(0.5, 0.5)).unwrap();
        let k = predicted_steps(&spec, 1e-12).unwrap();
        assert_eq!(k, 10);
        assert!(0.25f64.powi(2 * k as i32) <= 1e-12);
        assert!(0.25f64.powi(2 * (k as i32 - 1)) > 1e-12);
        let v = verify_qlinear(&one_d(0.5, 0.5), k, 1e-12, 1e-6).unwrap();
        assert_eq!(v.predicted_steps, Some(k));
        assert!(v.residual_ok);
    }

    #[test]
    fn zero_steps_is_an_error() {
        assert!(verify_qlinear(&one_d(0.5, 0.5), 0, 1e-12, 1e-6).is_err());
        assert_eq!(steps_for(1.0, 1e-12), None);
    }

    #[test]
    fn one_dimensional_ratio_is_exact() {
        let v = verify_qlinear(&one_d(0.5, 0.5), 10, 1e-12, 1e-15).unwrap();
        for w in v.residuals.windows(2) {
            assert_eq!(w[1] / w[0], 0.0625);
        }
        assert!(v.converged());
    }

    #[test]
    fn fixed_point_stays_put() {
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let theta = vec![0.5, -1.0];
        let t = vec![1.0 * 0.5 - 2.0, 3.0 * 0.5 - 4.0];
        let mut s = LinearSystem::new(x, theta.clone(), t, 0.1, 0.9).unwrap();
        for _ in 0..20 {
            s.step();
            assert_eq!(s.residual(), 0.0);
            assert_eq!(s.theta(), theta.as_slice());
        }
    }

    #[test]
    fn zero_learning_rate_decouples() {
        let mut s = one_d(0.0, 0.7);
        for k in 1..=15 {
            s.step();
            assert_eq!(s.theta(), [0.0]);
            let expect = libm::pow(0.7, k as f64);
            assert!((s.targets()[0] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn bound_examples() {
        // d_max = 4: X = diag(2, 1).
        let x = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((stable_lr_bound(&x, 0.9).unwrap() - 1.9 / 3.6).abs() < 1e-15);
        assert!((stable_lr_bound(&x, 0.9).unwrap() - 0.527778).abs() < 1e-6);
        assert!((stable_lr_bound(&x, 1.0 - 1e-12).unwrap() - 0.5).abs() < 1e-9);
        let eye = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((stable_lr_bound(&eye, 0.5).unwrap() - 3.0).abs() < 1e-14);
        assert!(matches!(
            stable_lr_bound(&Tensor::zeros(&[2, 2]), 0.5),
            Err(Error::ZeroMatrix)
        ));
    }

    #[test]
    fn closed_form_matches_simulation_small() {
        let sys = random_system(5, 3, 0.9, 0.5, Design::Gaussian, 1).unwrap();
        let spec = SpectralData::of(&sys).unwrap();
        let mut s = sys.clone();
        for _ in 0..10 {
            s.step();
        }
        let cf = closed_form_residual(&spec, 10);
        let sim = s.residual_vector();
        let err = cf
            .iter()
            .zip(&sim)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max);
        assert!(err <= 1e-8, "{err}");
        assert!(spec.eigen.orthogonality_error() <= 1e-10);
        assert!(spec.eigen.reconstruction_error(&sys.gram()) <= 1e-8);
    }

    #[test]
    fn degenerate_direction_is_skipped() {
        // X = diag(1, 0.5) as a 2×2 system; b only along the second axis.
        let x = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.5]).unwrap();
        let sys = LinearSystem::new(x, vec![0.0, 0.0], vec![0.0, 1.0], 0.1, 0.9).unwrap();
        let v = verify_qlinear(&sys, 400, 1e-12, 1e-8).unwrap();
        // a = 0.9·(1 − 0.1·d): 0.81 for d = 1, 0.8775 for d = 0.25.
        assert_eq!(v.effective_index, 1);
        assert!(!v.degenerate);
        let x = Tensor::matrix(2, 2, vec![0.5, 0.0, 0.0, 1.0]).unwrap();
        let sys = LinearSystem::new(x, vec![0.0, 0.0], vec![0.0, 1.0], 0.1, 0.9).unwrap();
        let v = verify_qlinear(&sys, 400, 1e-12, 1e-8).unwrap();
        assert!(v.degenerate);
        assert!((v.a_sq - 0.81 * 0.81).abs() < 1e-15);
        assert!(
            v.ratio_ok && v.residual_ok,
            "{:?}",
            (v.late_ratio, v.a_sq, v.ratio_step, v.final_residual())
        );
    }

    #[test]
    fn unstable_rate_is_reported() {
        let sys = random_system(6, 3, 0.99, 1.1, Design::Gaussian, 2).unwrap();
        let v = verify_qlinear(&sys, 200, 1e-12, 1e-6).unwrap();
        assert!(v.divergence_expected && v.diverged && !v.converged());
        assert!(v.predicted_steps.is_none());
    }
}
