//! Loss landscapes with known constants and their stochastic-gradient oracles.
//!
//! Both objectives expose the strong-convexity constant `c`, the smoothness
//! constant `L` and the optimal value `F*`, so every error bound can be
//! evaluated with exact (or certified) inputs.

use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("dimension mismatch: objective has dim {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid objective: {0}")]
    InvalidParameters(String),
    #[error("subsampled gradients need a finite-sum objective")]
    SubsamplingUnsupported,
    #[error("full-batch descent did not reach gradient norm {tol:e} within {iterations} iterations")]
    NoMinimizer { tol: f64, iterations: usize },
}

/// Separable quadratic `F(w) = ½ Σ λ_i (w_i − w*_i)² + F*`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    eigenvalues: Vec<f64>,
    w_star: Vec<f64>,
    f_star: f64,
}

impl Quadratic {
    pub fn new(eigenvalues: Vec<f64>, w_star: Vec<f64>, f_star: f64) -> Result<Self, ObjectiveError> {
        if eigenvalues.is_empty() {
            return Err(ObjectiveError::InvalidParameters("quadratic needs at least one eigenvalue".into()));
        }
        if eigenvalues.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(ObjectiveError::InvalidParameters("eigenvalues must be positive and finite".into()));
        }
        if w_star.len() != eigenvalues.len() {
            return Err(ObjectiveError::DimensionMismatch { expected: eigenvalues.len(), got: w_star.len() });
        }
        if !f_star.is_finite() {
            return Err(ObjectiveError::InvalidParameters("f_star must be finite".into()));
        }
        Ok(Self { eigenvalues, w_star, f_star })
    }

    /// Spectrum log-spaced between `c` and `l`, minimizer at the origin, `F* = 0`.
    pub fn log_spaced(c: f64, l: f64, dim: usize) -> Result<Self, ObjectiveError> {
        if !(c > 0.0 && l >= c && dim >= 1) {
            return Err(ObjectiveError::InvalidParameters(format!(
                "log-spaced spectrum needs 0 < c <= L and dim >= 1, got c={c}, L={l}, dim={dim}"
            )));
        }
        if dim == 1 && c != l {
            return Err(ObjectiveError::InvalidParameters("a 1-dimensional spectrum needs c == L".into()));
        }
        let eigenvalues = (0..dim)
            .map(|i| {
                if i == 0 {
                    c
                } else if i == dim - 1 {
                    l
                } else {
                    c * (l / c).powf(i as f64 / (dim - 1) as f64)
                }
            })
            .collect();
        Self::new(eigenvalues, vec![0.0; dim], 0.0)
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn w_star(&self) -> &[f64] {
        &self.w_star
    }

    /// Exact `E[F(w_j)] − F*` of serial SGD `w ← w − η(∇F(w) + z)` with
    /// isotropic Gaussian `z`, `E‖z‖² = noise_sq`, for `j = 0..=steps`.
    ///
    /// Each coordinate error obeys `E[e²] ← (1−ηλ)² E[e²] + η² noise_sq/d`.
    pub fn expected_sgd_excess(&self, w0: &[f64], eta: f64, noise_sq: f64, steps: usize) -> Vec<f64> {
        let d = self.eigenvalues.len() as f64;
        let mut second: Vec<f64> = w0.iter().zip(&self.w_star).map(|(w, s)| (w - s).powi(2)).collect();
        let mut out = Vec::with_capacity(steps + 1);
        let excess = |second: &[f64]| 0.5 * self.eigenvalues.iter().zip(second).map(|(l, e)| l * e).sum::<f64>();
        out.push(excess(&second));
        for _ in 0..steps {
            for (e, l) in second.iter_mut().zip(&self.eigenvalues) {
                *e = (1.0 - eta * l).powi(2) * *e + eta * eta * noise_sq / d;
            }
            out.push(excess(&second));
        }
        out
    }
}

/// Synthetic binary-classification recipe for [`Logistic::synthetic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticRecipe {
    pub n: usize,
    pub d: usize,
    /// Distance of each class mean from the origin along the all-ones direction.
    pub separation: f64,
    pub seed: u64,
    #[serde(default)]
    pub l2: f64,
}

/// L2-regularized logistic regression
/// `F(w) = (1/N) Σ ln(1 + exp(−y_n x_n·w)) + (λ/2)‖w‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logistic {
    features: Vec<f64>,
    labels: Vec<f64>,
    d: usize,
    l2: f64,
    smoothness: f64,
    optimum: Option<(Vec<f64>, f64)>,
}

/// Gradient-norm target for the minimizer solve at construction.
pub const LOGISTIC_SOLVE_TOL: f64 = 1e-10;
const LOGISTIC_SOLVE_MAX_ITERS: usize = 2_000_000;

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Logistic {
    /// `features` is row-major `labels.len() × d`.
    pub fn new(features: Vec<f64>, labels: Vec<f64>, d: usize, l2: f64) -> Result<Self, ObjectiveError> {
        if d == 0 || labels.is_empty() || features.len() != labels.len() * d {
            return Err(ObjectiveError::InvalidParameters(format!(
                "feature matrix of {} values does not match {} labels × d={d}",
                features.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|y| *y != 1.0 && *y != -1.0) {
            return Err(ObjectiveError::InvalidParameters("labels must be ±1".into()));
        }
        if !(l2.is_finite() && l2 >= 0.0) {
            return Err(ObjectiveError::InvalidParameters(format!("l2 must be nonnegative, got {l2}")));
        }
        let max_row_sq = features
            .chunks_exact(d)
            .map(|row| row.iter().map(|x| x * x).sum::<f64>())
            .fold(0.0, f64::max);
        let mut obj = Self { features, labels, d, l2, smoothness: l2 + max_row_sq / 4.0, optimum: None };
        if l2 > 0.0 {
            obj.optimum = Some(obj.solve()?);
        }
        Ok(obj)
    }

    pub fn synthetic(recipe: &LogisticRecipe) -> Result<Self, ObjectiveError> {
        let LogisticRecipe { n, d, separation, seed, l2 } = *recipe;
        if n == 0 || d == 0 {
            return Err(ObjectiveError::InvalidParameters("synthetic dataset needs n, d >= 1".into()));
        }
        let mut rng = crate::rng::stream(seed);
        let shift = separation / (d as f64).sqrt();
        let mut features = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let y = if rng.random::<bool>() { 1.0 } else { -1.0 };
            labels.push(y);
            for _ in 0..d {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(y * shift + z);
            }
        }
        Self::new(features, labels, d, l2)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn l2(&self) -> f64 {
        self.l2
    }

    fn row(&self, n: usize) -> &[f64] {
        &self.features[n * self.d..(n + 1) * self.d]
    }

    fn sample_loss(&self, n: usize, w: &[f64]) -> f64 {
        let margin = self.labels[n] * dot(self.row(n), w);
        softplus(-margin)
    }

    /// Adds `scale · ∇f_n(w)` (data term only) into `out`.
    fn add_sample_gradient(&self, n: usize, w: &[f64], scale: f64, out: &mut [f64]) {
        let y = self.labels[n];
        let row = self.row(n);
        let coeff = -y * sigmoid(-y * dot(row, w)) * scale;
        for (o, x) in out.iter_mut().zip(row) {
            *o += coeff * x;
        }
    }

    fn loss(&self, w: &[f64]) -> f64 {
        let data: f64 = (0..self.len()).map(|n| self.sample_loss(n, w)).sum::<f64>() / self.len() as f64;
        data + 0.5 * self.l2 * dot(w, w)
    }

    fn gradient_into(&self, w: &[f64], out: &mut [f64]) {
        out.iter_mut().zip(w).for_each(|(o, wi)| *o = self.l2 * wi);
        let scale = 1.0 / self.len() as f64;
        for n in 0..self.len() {
            self.add_sample_gradient(n, w, scale, out);
        }
    }

    // Full-batch gradient descent with step 1/L; linear convergence since λ > 0.
    fn solve(&self) -> Result<(Vec<f64>, f64), ObjectiveError> {
        let step = 1.0 / self.smoothness;
        let mut w = vec![0.0; self.d];
        let mut g = vec![0.0; self.d];
        for _ in 0..LOGISTIC_SOLVE_MAX_ITERS {
            self.gradient_into(&w, &mut g);
            if dot(&g, &g).sqrt() <= LOGISTIC_SOLVE_TOL {
                let f = self.loss(&w);
                return Ok((w, f));
            }
            for (wi, gi) in w.iter_mut().zip(&g) {
                *wi -= step * gi;
            }
        }
        Err(ObjectiveError::NoMinimizer { tol: LOGISTIC_SOLVE_TOL, iterations: LOGISTIC_SOLVE_MAX_ITERS })
    }
}

/// Loss landscape with analytically known constants.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    Quadratic(Quadratic),
    Logistic(Logistic),
}

impl Objective {
    pub fn dim(&self) -> usize {
        match self {
            Objective::Quadratic(q) => q.eigenvalues.len(),
            Objective::Logistic(l) => l.d,
        }
    }

    fn check_dim(&self, got: usize) -> Result<(), ObjectiveError> {
        if got == self.dim() {
            Ok(())
        } else {
            Err(ObjectiveError::DimensionMismatch { expected: self.dim(), got })
        }
    }

    /// Strong-convexity constant `c` (a certified lower bound for logistic).
    pub fn strong_convexity(&self) -> f64 {
        match self {
            Objective::Quadratic(q) => q.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min),
            Objective::Logistic(l) => l.l2,
        }
    }

    /// Smoothness constant `L` (a certified upper bound for logistic).
    pub fn smoothness(&self) -> f64 {
        match self {
            Objective::Quadratic(q) => q.eigenvalues.iter().copied().fold(0.0, f64::max),
            Objective::Logistic(l) => l.smoothness,
        }
    }

    /// `F*`; `None` for unregularized logistic regression, which need not
    /// attain its infimum.
    pub fn f_star(&self) -> Option<f64> {
        match self {
            Objective::Quadratic(q) => Some(q.f_star),
            Objective::Logistic(l) => l.optimum.as_ref().map(|(_, f)| *f),
        }
    }

    pub fn minimizer(&self) -> Option<&[f64]> {
        match self {
            Objective::Quadratic(q) => Some(&q.w_star),
            Objective::Logistic(l) => l.optimum.as_ref().map(|(w, _)| w.as_slice()),
        }
    }

    pub fn full_loss(&self, w: &[f64]) -> Result<f64, ObjectiveError> {
        self.check_dim(w.len())?;
        Ok(self.loss_unchecked(w))
    }

    pub fn full_gradient(&self, w: &[f64]) -> Result<Vec<f64>, ObjectiveError> {
        self.check_dim(w.len())?;
        let mut g = vec![0.0; w.len()];
        self.gradient_into(w, &mut g);
        Ok(g)
    }

    pub(crate) fn loss_unchecked(&self, w: &[f64]) -> f64 {
        match self {
            Objective::Quadratic(q) => {
                let quad: f64 = q
                    .eigenvalues
                    .iter()
                    .zip(w.iter().zip(&q.w_star))
                    .map(|(l, (wi, si))| l * (wi - si) * (wi - si))
                    .sum();
                0.5 * quad + q.f_star
            }
            Objective::Logistic(l) => l.loss(w),
        }
    }

    pub(crate) fn gradient_into(&self, w: &[f64], out: &mut [f64]) {
        match self {
            Objective::Quadratic(q) => {
                for ((o, l), (wi, si)) in out.iter_mut().zip(&q.eigenvalues).zip(w.iter().zip(&q.w_star)) {
                    *o = l * (wi - si);
                }
            }
            Objective::Logistic(l) => l.gradient_into(w, out),
        }
    }

    /// `‖∇F(w)‖²`.
    pub fn grad_norm_sq(&self, w: &[f64]) -> Result<f64, ObjectiveError> {
        let g = self.full_gradient(w)?;
        Ok(dot(&g, &g))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    /// `∇F(w) + z` with isotropic Gaussian `z`, `E‖z‖² = σ²/m`.
    AdditiveGaussian { sigma_sq: f64 },
    /// Average of per-sample gradients over `m` points drawn without replacement.
    Subsampling,
}

/// Stochastic first-order oracle `g(w, ξ)` over mini-batches of size `m`.
#[derive(Debug, Clone)]
pub struct GradientOracle {
    objective: Arc<Objective>,
    noise: NoiseModel,
    m: usize,
}

impl GradientOracle {
    pub fn new(objective: Arc<Objective>, noise: NoiseModel, m: usize) -> Result<Self, ObjectiveError> {
        if m == 0 {
            return Err(ObjectiveError::InvalidParameters("mini-batch size must be at least 1".into()));
        }
        match noise {
            NoiseModel::AdditiveGaussian { sigma_sq } if !(sigma_sq.is_finite() && sigma_sq >= 0.0) => {
                return Err(ObjectiveError::InvalidParameters(format!(
                    "sigma_sq must be nonnegative, got {sigma_sq}"
                )));
            }
            NoiseModel::Subsampling => match objective.as_ref() {
                Objective::Logistic(l) if m <= l.len() => {}
                Objective::Logistic(l) => {
                    return Err(ObjectiveError::InvalidParameters(format!(
                        "mini-batch size {m} exceeds dataset size {}",
                        l.len()
                    )))
                }
                Objective::Quadratic(_) => return Err(ObjectiveError::SubsamplingUnsupported),
            },
            _ => {}
        }
        Ok(Self { objective, noise, m })
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    pub fn objective_arc(&self) -> &Arc<Objective> {
        &self.objective
    }

    pub fn noise(&self) -> NoiseModel {
        self.noise
    }

    pub fn batch_size(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.objective.dim()
    }

    /// Exact `σ²` for the Gaussian model, `None` when it has to be estimated.
    pub fn sigma_sq(&self) -> Option<f64> {
        match self.noise {
            NoiseModel::AdditiveGaussian { sigma_sq } => Some(sigma_sq),
            NoiseModel::Subsampling => None,
        }
    }

    pub fn stochastic_gradient<R: Rng + ?Sized>(&self, w: &[f64], rng: &mut R) -> Result<Vec<f64>, ObjectiveError> {
        self.objective.check_dim(w.len())?;
        let mut g = vec![0.0; w.len()];
        self.gradient_sample_into(w, rng, &mut g);
        Ok(g)
    }

    /// Writes one stochastic gradient into `out`. Dimensions are the caller's
    /// responsibility. Gaussian noise consumes exactly `dim` normal draws,
    /// in coordinate order.
    pub(crate) fn gradient_sample_into<R: Rng + ?Sized>(&self, w: &[f64], rng: &mut R, out: &mut [f64]) {
        match self.noise {
            NoiseModel::AdditiveGaussian { sigma_sq } => {
                self.objective.gradient_into(w, out);
                let sd = (sigma_sq / (self.m as f64 * w.len() as f64)).sqrt();
                let normal = Normal::new(0.0, sd).expect("finite standard deviation");
                for o in out.iter_mut() {
                    *o += normal.sample(rng);
                }
            }
            NoiseModel::Subsampling => {
                let Objective::Logistic(l) = self.objective.as_ref() else {
                    unreachable!("validated at construction")
                };
                out.iter_mut().zip(w).for_each(|(o, wi)| *o = l.l2 * wi);
                let scale = 1.0 / self.m as f64;
                for n in index::sample(rng, l.len(), self.m) {
                    l.add_sample_gradient(n, w, scale, out);
                }
            }
        }
    }
}

/// Variance constants of an oracle, either exact or fitted from samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConstants {
    pub sigma_sq: f64,
    pub m_g: f64,
    pub estimated: bool,
}

/// Variance constants `(σ², M_G)` with
/// `E‖g − ∇F(w)‖² ≤ σ²/m + (M_G/m)‖∇F(w)‖²`.
///
/// Exact for the Gaussian model. For subsampling, the scaled deviation
/// `m·E‖g − ∇F‖²` is measured at each probe point with `draws` oracle calls,
/// `M_G` is the least-squares slope against `‖∇F‖²` (floored at 0) and `σ²`
/// is the smallest intercept that puts every probe under the line.
pub fn noise_constants<R: Rng + ?Sized>(
    oracle: &GradientOracle,
    probes: &[Vec<f64>],
    draws: usize,
    rng: &mut R,
) -> Result<NoiseConstants, ObjectiveError> {
    if let Some(sigma_sq) = oracle.sigma_sq() {
        return Ok(NoiseConstants { sigma_sq, m_g: 0.0, estimated: false });
    }
    if probes.len() < 2 || draws < 2 {
        return Err(ObjectiveError::InvalidParameters("need at least two probes and two draws".into()));
    }
    let mut xs = Vec::with_capacity(probes.len());
    let mut ys = Vec::with_capacity(probes.len());
    for w in probes {
        let grad = oracle.objective.full_gradient(w)?;
        let mut acc = 0.0;
        for _ in 0..draws {
            let g = oracle.stochastic_gradient(w, rng)?;
            acc += g.iter().zip(&grad).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        xs.push(dot(&grad, &grad));
        ys.push(oracle.m as f64 * acc / draws as f64);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let m_g = if sxx > 0.0 { (sxy / sxx).max(0.0) } else { 0.0 };
    let sigma_sq = xs.iter().zip(&ys).map(|(x, y)| y - m_g * x).fold(0.0, f64::max);
    Ok(NoiseConstants { sigma_sq, m_g, estimated: true })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn quad14() -> Objective {
        Objective::Quadratic(Quadratic::new(vec![1.0, 4.0], vec![0.0, 0.0], 0.0).unwrap())
    }

    fn logistic(l2: f64) -> Objective {
        Objective::Logistic(
            Logistic::synthetic(&LogisticRecipe { n: 200, d: 3, separation: 1.5, seed: 9, l2 }).unwrap(),
        )
    }

    fn random_point<R: Rng>(rng: &mut R, d: usize, scale: f64) -> Vec<f64> {
        (0..d).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect()
    }

    #[test]
    fn quadratic_loss_values() {
        let q = quad14();
        assert_eq!(q.full_loss(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(q.full_loss(&[1.0, 1.0]).unwrap(), 2.5);
        assert_eq!(q.full_gradient(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        let shifted = Objective::Quadratic(Quadratic::new(vec![2.0], vec![3.0], 1.5).unwrap());
        assert_eq!(shifted.full_loss(&[3.0]).unwrap(), 1.5);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let q = quad14();
        assert_eq!(q.full_loss(&[1.0]), Err(ObjectiveError::DimensionMismatch { expected: 2, got: 1 }));
        assert!(q.full_gradient(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn log_spaced_spectrum_endpoints() {
        let q = Quadratic::log_spaced(1.0, 4.0, 10).unwrap();
        let obj = Objective::Quadratic(q.clone());
        assert_eq!(obj.strong_convexity(), 1.0);
        assert_eq!(obj.smoothness(), 4.0);
        assert!(q.eigenvalues().windows(2).all(|w| w[0] < w[1]));
        assert!(Quadratic::log_spaced(2.0, 1.0, 3).is_err());
    }

    #[test]
    fn logistic_at_origin_is_ln2() {
        let obj = logistic(0.0);
        assert!((obj.full_loss(&[0.0; 3]).unwrap() - std::f64::consts::LN_2).abs() < 1e-14);
        assert!(obj.f_star().is_none());
    }

    #[test]
    fn logistic_minimizer_is_stationary() {
        let obj = logistic(0.1);
        let w = obj.minimizer().unwrap().to_vec();
        assert!(obj.grad_norm_sq(&w).unwrap().sqrt() <= LOGISTIC_SOLVE_TOL);
        assert_eq!(obj.full_loss(&w).unwrap(), obj.f_star().unwrap());
        assert!(obj.strong_convexity() >= 0.1);
        assert!(obj.smoothness() > obj.strong_convexity());
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = stream(1);
        for obj in [quad14(), logistic(0.05)] {
            let d = obj.dim();
            for _ in 0..50 {
                let w = random_point(&mut rng, d, 2.0);
                let g = obj.full_gradient(&w).unwrap();
                for i in 0..d {
                    let h = 1e-5;
                    let mut wp = w.clone();
                    let mut wm = w.clone();
                    wp[i] += h;
                    wm[i] -= h;
                    let fd = (obj.full_loss(&wp).unwrap() - obj.full_loss(&wm).unwrap()) / (2.0 * h);
                    let scale = g[i].abs().max(1.0);
                    assert!((fd - g[i]).abs() / scale < 1e-6, "coord {i}: fd {fd} vs {}", g[i]);
                }
            }
        }
    }

    #[test]
    fn strong_convexity_inequality_on_random_points() {
        let mut rng = stream(2);
        for obj in [Objective::Quadratic(Quadratic::log_spaced(1.0, 4.0, 10).unwrap()), logistic(0.1)] {
            let (c, f_star) = (obj.strong_convexity(), obj.f_star().unwrap());
            for _ in 0..1000 {
                let w = random_point(&mut rng, obj.dim(), 5.0);
                let lhs = 2.0 * c * (obj.full_loss(&w).unwrap() - f_star);
                let rhs = obj.grad_norm_sq(&w).unwrap();
                assert!(lhs <= rhs * (1.0 + 1e-12) + 1e-15, "{lhs} > {rhs}");
            }
        }
    }

    #[test]
    fn gaussian_oracle_is_unbiased_with_exact_variance() {
        let obj = Arc::new(Objective::Quadratic(Quadratic::log_spaced(1.0, 4.0, 10).unwrap()));
        let sigma_sq = 1.0;
        let m = 2;
        let oracle = GradientOracle::new(obj.clone(), NoiseModel::AdditiveGaussian { sigma_sq }, m).unwrap();
        let w: Vec<f64> = (0..10).map(|i| 0.1 * i as f64).collect();
        let grad = obj.full_gradient(&w).unwrap();
        let mut rng = stream(3);
        let draws = 100_000;
        let mut sums = [0.0; 10];
        let mut sq_sums = [0.0; 10];
        let mut dev_sq = 0.0;
        for _ in 0..draws {
            let g = oracle.stochastic_gradient(&w, &mut rng).unwrap();
            for i in 0..10 {
                let e = g[i] - grad[i];
                sums[i] += g[i];
                sq_sums[i] += e * e;
                dev_sq += e * e;
            }
        }
        for i in 0..10 {
            let mean = sums[i] / draws as f64;
            let se = (sq_sums[i] / draws as f64 / draws as f64).sqrt();
            assert!((mean - grad[i]).abs() < 3.0 * se, "coord {i}: {mean} vs {}", grad[i]);
        }
        let var = dev_sq / draws as f64;
        let target = sigma_sq / m as f64;
        assert!((var - target).abs() / target < 0.02, "variance {var} vs {target}");
    }

    #[test]
    fn subsampling_unbiased_and_full_batch_exact() {
        let obj = Arc::new(logistic(0.1));
        let n = match obj.as_ref() {
            Objective::Logistic(l) => l.len(),
            _ => unreachable!(),
        };
        let w = vec![0.3, -0.2, 0.5];
        let grad = obj.full_gradient(&w).unwrap();

        let full = GradientOracle::new(obj.clone(), NoiseModel::Subsampling, n).unwrap();
        let g = full.stochastic_gradient(&w, &mut stream(4)).unwrap();
        for (a, b) in g.iter().zip(&grad) {
            assert!((a - b).abs() < 1e-12);
        }

        let oracle = GradientOracle::new(obj.clone(), NoiseModel::Subsampling, 4).unwrap();
        let mut rng = stream(5);
        let draws = 100_000;
        let mut acc: Vec<crate::stats::Welford> = vec![Default::default(); 3];
        for _ in 0..draws {
            let g = oracle.stochastic_gradient(&w, &mut rng).unwrap();
            for i in 0..3 {
                acc[i].push(g[i]);
            }
        }
        for i in 0..3 {
            assert!((acc[i].mean() - grad[i]).abs() < 3.0 * acc[i].std_err());
        }
    }

    #[test]
    fn subsampling_rejected_for_quadratic() {
        let obj = Arc::new(quad14());
        assert_eq!(
            GradientOracle::new(obj, NoiseModel::Subsampling, 1).unwrap_err(),
            ObjectiveError::SubsamplingUnsupported
        );
    }

    #[test]
    fn noise_constants_bound_sampled_variance() {
        let obj = Arc::new(logistic(0.1));
        let oracle = GradientOracle::new(obj.clone(), NoiseModel::Subsampling, 1).unwrap();
        let mut rng = stream(6);
        let probes: Vec<Vec<f64>> = (0..8).map(|_| random_point(&mut rng, 3, 2.0)).collect();
        let nc = noise_constants(&oracle, &probes, 2000, &mut rng).unwrap();
        assert!(nc.estimated);
        assert!(nc.sigma_sq > 0.0 && nc.m_g >= 0.0);

        let exact = GradientOracle::new(obj, NoiseModel::AdditiveGaussian { sigma_sq: 0.7 }, 3).unwrap();
        let nc = noise_constants(&exact, &probes, 10, &mut rng).unwrap();
        assert_eq!(nc, NoiseConstants { sigma_sq: 0.7, m_g: 0.0, estimated: false });
    }
}
