//! A single random-feature GP expert.
//!
//! The expert keeps a Gaussian belief `N(θ̂, Σ)` over the `2·n_rf` feature
//! weights. Gaussian likelihoods are corrected in closed form (a rank-one
//! Kalman step); logistic likelihoods use a Laplace step whose mode is found by
//! Newton iteration. Every `correct_*` returns the one-step-ahead Bayesian loss
//! `-log p(y | past)` computed from the predictive *before* the update.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::kernels::{FeatureMap, KernelSpec};
use crate::linalg::symmetrize;

const NEWTON_MAX_ITER: usize = 25;
const NEWTON_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Likelihood {
    /// `y ~ N(φᵀθ, σ_n²)` with `σ_n²` taken from the kernel spec.
    Gaussian,
    /// `p(y | θ) = σ(y·φᵀθ)`, labels in `{-1, +1}`.
    Logistic,
}

/// One-step predictive moments of an expert.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictiveMoments {
    /// Predicted output (Gaussian) or `P(y = +1)` (logistic).
    pub mean: f64,
    /// Predictive variance; `p(1-p)` for the logistic case.
    pub variance: f64,
    /// `log p(y | past)` once the observation is known.
    pub log_likelihood: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ExpertState {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    likelihood: Likelihood,
    drift: Option<f64>,
    map: Arc<FeatureMap>,
    spec: Arc<KernelSpec>,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-log σ(z)`, stable for large `|z|`.
pub(crate) fn neg_log_sigmoid(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// Probit-matched moderation factor `(1 + π s²/8)^{-1/2}`.
pub(crate) fn moderation(s2: f64) -> f64 {
    1.0 / (1.0 + PI * s2 / 8.0).sqrt()
}

pub(crate) fn gaussian_nll(y: f64, mean: f64, variance: f64) -> f64 {
    0.5 * (2.0 * PI * variance).ln() + 0.5 * (y - mean).powi(2) / variance
}

fn check_label(y: f64) -> Result<()> {
    if y == 1.0 || y == -1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("logistic label must be ±1, got {y}")))
    }
}

impl ExpertState {
    /// Fresh expert with prior `N(0, σ_θ²·I)`.
    pub fn new(spec: Arc<KernelSpec>, map: Arc<FeatureMap>, likelihood: Likelihood) -> Result<Self> {
        spec.validate()?;
        check_dim(spec.input_dim, map.input_dim())?;
        let n = map.feature_dim();
        Ok(ExpertState {
            mean: DVector::zeros(n),
            cov: DMatrix::identity(n, n) * spec.magnitude,
            likelihood,
            drift: None,
            map,
            spec,
        })
    }

    /// Builds an expert from explicit moments (checkpoints, tests).
    pub fn from_moments(
        spec: Arc<KernelSpec>,
        map: Arc<FeatureMap>,
        likelihood: Likelihood,
        mean: DVector<f64>,
        cov: DMatrix<f64>,
    ) -> Result<Self> {
        let mut e = Self::new(spec, map, likelihood)?;
        check_dim(e.mean.len(), mean.len())?;
        check_dim(e.mean.len(), cov.nrows())?;
        check_dim(e.mean.len(), cov.ncols())?;
        e.mean = mean;
        e.cov = cov;
        Ok(e)
    }

    /// Enables random-walk dynamics `θ_{t+1} = θ_t + ε`, `ε ~ N(0, σ_ε²·I)`.
    pub fn with_drift(mut self, drift_variance: f64) -> Result<Self> {
        if !(drift_variance >= 0.0 && drift_variance.is_finite()) {
            return Err(Error::InvalidArgument("drift variance must be ≥ 0".into()));
        }
        self.drift = Some(drift_variance);
        Ok(self)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn likelihood(&self) -> Likelihood {
        self.likelihood
    }

    pub fn drift(&self) -> Option<f64> {
        self.drift
    }

    pub fn map(&self) -> &Arc<FeatureMap> {
        &self.map
    }

    pub fn spec(&self) -> &Arc<KernelSpec> {
        &self.spec
    }

    /// Latent mean `φᵀθ̂` and variance `φᵀΣφ` at a precomputed feature vector.
    fn latent(&self, phi: &DVector<f64>) -> (f64, f64, DVector<f64>) {
        let k = &self.cov * phi;
        (phi.dot(&self.mean), phi.dot(&k).max(0.0), k)
    }

    fn require(&self, likelihood: Likelihood) -> Result<()> {
        if self.likelihood == likelihood {
            Ok(())
        } else {
            Err(Error::State(format!(
                "operation requires a {likelihood:?} expert, this one is {:?}",
                self.likelihood
            )))
        }
    }

    pub fn predict_gauss(&self, x: &[f64]) -> Result<PredictiveMoments> {
        self.require(Likelihood::Gaussian)?;
        let phi = self.map.phi(x)?;
        let (mu, s2, _) = self.latent(&phi);
        Ok(PredictiveMoments {
            mean: mu,
            variance: s2 + self.spec.noise,
            log_likelihood: None,
        })
    }

    /// Closed-form Bayesian correction; returns the pre-update loss.
    pub fn correct_gauss(&mut self, x: &[f64], y: f64) -> Result<f64> {
        self.require(Likelihood::Gaussian)?;
        let phi = self.map.phi(x)?;
        let (mu, s2, k) = self.latent(&phi);
        let var = s2 + self.spec.noise;
        let loss = gaussian_nll(y, mu, var);
        self.mean.axpy((y - mu) / var, &k, 1.0);
        self.cov.ger(-1.0 / var, &k, &k, 1.0);
        symmetrize(&mut self.cov);
        Ok(loss)
    }

    /// Inflates the covariance by `σ_ε²·I`; no-op without drift.
    pub fn drift_propagate(&mut self) {
        if let Some(q) = self.drift {
            if q > 0.0 {
                for i in 0..self.cov.nrows() {
                    self.cov[(i, i)] += q;
                }
            }
        }
    }

    /// `P(y = +1)` under the probit-moderated logistic predictive.
    pub fn predict_logistic(&self, x: &[f64]) -> Result<f64> {
        self.require(Likelihood::Logistic)?;
        let phi = self.map.phi(x)?;
        let (mu, s2, _) = self.latent(&phi);
        Ok(sigmoid(moderation(s2) * mu))
    }

    /// Laplace correction for a ±1 label; returns the pre-update loss.
    ///
    /// The log posterior `log N(θ; θ̂, Σ) + log σ(y·φᵀθ)` depends on θ only
    /// through `φᵀθ` beyond the prior, so its mode is `θ̂ + a·Σφ` for a scalar
    /// `a`. Newton iterations (with step halving) run on that coefficient.
    pub fn correct_logistic(&mut self, x: &[f64], y: f64) -> Result<f64> {
        self.require(Likelihood::Logistic)?;
        check_label(y)?;
        let phi = self.map.phi(x)?;
        let (mu, s2, k) = self.latent(&phi);
        let loss = neg_log_sigmoid(y * moderation(s2) * mu);
        if s2 == 0.0 {
            return Ok(loss);
        }

        let objective = |a: f64| -0.5 * a * a * s2 - neg_log_sigmoid(y * (mu + a * s2));
        let mut a = 0.0;
        let mut converged = false;
        for _ in 0..NEWTON_MAX_ITER {
            let z = mu + a * s2;
            let residual = y * (1.0 - sigmoid(y * z)) - a;
            if residual.abs() <= NEWTON_TOL {
                converged = true;
                break;
            }
            let p = sigmoid(z);
            let grad = s2 * residual;
            let hess = -s2 - s2 * s2 * p * (1.0 - p);
            let mut step = -grad / hess;
            let current = objective(a);
            let mut accepted = false;
            for _ in 0..50 {
                if objective(a + step) >= current {
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
            a += step;
        }
        if !converged {
            let z = mu + a * s2;
            if (y * (1.0 - sigmoid(y * z)) - a).abs() > NEWTON_TOL {
                return Err(Error::Convergence {
                    iterations: NEWTON_MAX_ITER,
                    last_latent: z,
                });
            }
        }

        let z = mu + a * s2;
        let p = sigmoid(z);
        let lambda = p * (1.0 - p);
        self.mean.axpy(a, &k, 1.0);
        self.cov.ger(-lambda / (1.0 + lambda * s2), &k, &k, 1.0);
        symmetrize(&mut self.cov);
        Ok(loss)
    }

    /// Likelihood-agnostic predictive moments.
    pub fn predict(&self, x: &[f64]) -> Result<PredictiveMoments> {
        match self.likelihood {
            Likelihood::Gaussian => self.predict_gauss(x),
            Likelihood::Logistic => {
                let p = self.predict_logistic(x)?;
                Ok(PredictiveMoments {
                    mean: p,
                    variance: p * (1.0 - p),
                    log_likelihood: None,
                })
            }
        }
    }

    /// Likelihood-agnostic correction.
    pub fn correct(&mut self, x: &[f64], y: f64) -> Result<f64> {
        match self.likelihood {
            Likelihood::Gaussian => self.correct_gauss(x, y),
            Likelihood::Logistic => self.correct_logistic(x, y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{sample_feature_map, KernelSpec};
    use proptest::prelude::*;
    use rand::Rng;

    fn expert(d: usize, n_rf: usize, magnitude: f64, noise: f64, lik: Likelihood) -> ExpertState {
        let spec = Arc::new(KernelSpec::rbf(1.0, magnitude, noise, d).unwrap());
        let map = Arc::new(sample_feature_map(&spec, n_rf, 17).unwrap());
        ExpertState::new(spec, map, lik).unwrap()
    }

    /// Dense batch posterior: Σ = (ΦᵀΦ/σn² + I/σθ²)⁻¹, θ̂ = ΣΦᵀy/σn².
    fn batch_posterior(e: &ExpertState, xs: &[Vec<f64>], ys: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let n = e.map().feature_dim();
        let (sn, st) = (e.spec().noise, e.spec().magnitude);
        let mut precision = DMatrix::identity(n, n) / st;
        let mut rhs = DVector::zeros(n);
        for (x, y) in xs.iter().zip(ys) {
            let phi = e.map().phi(x).unwrap();
            precision += &phi * phi.transpose() / sn;
            rhs += &phi * (*y / sn);
        }
        let cov = precision.try_inverse().unwrap();
        (&cov * rhs, cov)
    }

    fn min_eig(m: &DMatrix<f64>) -> f64 {
        m.clone().symmetric_eigen().eigenvalues.min()
    }

    #[test]
    fn fresh_prediction_is_prior() {
        let e = expert(2, 10, 1.0, 0.01, Likelihood::Gaussian);
        let p = e.predict_gauss(&[0.3, -1.2]).unwrap();
        assert_eq!(p.mean, 0.0);
        assert!((p.variance - 1.01).abs() < 1e-12);
        assert_eq!(p, e.predict_gauss(&[0.3, -1.2]).unwrap());
    }

    #[test]
    fn single_point_update() {
        let mut e = expert(1, 20, 1.0, 0.01, Likelihood::Gaussian);
        let loss = e.correct_gauss(&[0.5], 1.0).unwrap();
        assert!((loss - gaussian_nll(1.0, 0.0, 1.01)).abs() < 1e-12);
        let p = e.predict_gauss(&[0.5]).unwrap();
        assert!((p.mean - 1.0 / 1.01).abs() < 1e-9, "{}", p.mean);
    }

    #[test]
    fn fresh_loss_at_zero() {
        let mut e = expert(3, 8, 1.0, 0.01, Likelihood::Gaussian);
        let loss = e.correct_gauss(&[1.0, 2.0, 3.0], 0.0).unwrap();
        let oracle = 0.5 * (2.0 * std::f64::consts::PI * 1.01).ln();
        assert!((loss - oracle).abs() < 1e-12, "{loss}");
        assert!((loss - 0.923_94).abs() < 1e-4);
    }

    #[test]
    fn zero_innovation_keeps_mean() {
        let mut e = expert(2, 10, 1.0, 0.1, Likelihood::Gaussian);
        e.correct_gauss(&[0.1, 0.2], 0.7).unwrap();
        let before = e.mean().clone();
        let cov_before = e.cov().clone();
        let yhat = e.predict_gauss(&[1.0, -1.0]).unwrap().mean;
        e.correct_gauss(&[1.0, -1.0], yhat).unwrap();
        assert!((e.mean() - before).norm() < 1e-14);
        assert!(e.cov().trace() < cov_before.trace());
    }

    #[test]
    fn incremental_matches_batch() {
        let mut e = expert(3, 50, 1.0, 0.05, Likelihood::Gaussian);
        let mut rng = crate::kernels::seeded_rng(5);
        let xs: Vec<Vec<f64>> = (0..50).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x[0].sin() + 0.3 * x[1] + rng.random_range(-0.1..0.1)).collect();
        let (bm, bc) = batch_posterior(&e, &xs, &ys);
        for (x, y) in xs.iter().zip(&ys) {
            e.correct_gauss(x, *y).unwrap();
        }
        assert!((e.mean() - &bm).norm() / bm.norm() < 1e-6);
        assert!((e.cov() - &bc).norm() / bc.norm() < 1e-6);
    }

    #[test]
    fn drift_examples() {
        let mut e = expert(1, 4, 1.0, 0.1, Likelihood::Gaussian).with_drift(0.0).unwrap();
        let before = e.cov().clone();
        e.drift_propagate();
        assert_eq!(e.cov(), &before);

        let mut e = expert(1, 4, 1.0, 0.1, Likelihood::Gaussian).with_drift(0.001).unwrap();
        e.drift_propagate();
        assert!((e.cov() - DMatrix::identity(8, 8) * 1.001).norm() < 1e-15);
        assert!((e.cov().trace() - (8.0 + 8.0 * 0.001)).abs() < 1e-12);
    }

    #[test]
    fn drift_halves_compose() {
        let mut one = expert(1, 4, 1.0, 0.1, Likelihood::Gaussian).with_drift(0.5).unwrap();
        one.correct_gauss(&[0.25], 1.0).unwrap();
        let mut two = one.clone().with_drift(0.25).unwrap();
        one.drift_propagate();
        two.drift_propagate();
        two.drift_propagate();
        assert!((one.cov() - two.cov()).amax() <= 4.0 * f64::EPSILON);
    }

    #[test]
    fn logistic_predictive() {
        let e = expert(2, 15, 1.0, 0.1, Likelihood::Logistic);
        assert_eq!(e.predict_logistic(&[0.4, 0.1]).unwrap(), 0.5);

        let spec = e.spec().clone();
        let map = e.map().clone();
        let n = map.feature_dim();
        let x = [0.0, 0.0];
        let phi = map.phi(&x).unwrap();
        // Mean chosen so that φᵀθ̂ = 1 exactly at x; zero covariance disables moderation.
        let mean = &phi / phi.norm_squared();
        let sharp = ExpertState::from_moments(spec.clone(), map.clone(), Likelihood::Logistic, mean, DMatrix::zeros(n, n)).unwrap();
        assert!((sharp.predict_logistic(&x).unwrap() - 0.731_059).abs() < 1e-6);

        let mut last = 0.0;
        for scale in [1.0, 2.0, 5.0, 20.0, 100.0] {
            let mean = &phi * scale / phi.norm_squared();
            let ex = ExpertState::from_moments(spec.clone(), map.clone(), Likelihood::Logistic, mean, DMatrix::identity(n, n)).unwrap();
            let p = ex.predict_logistic(&x).unwrap();
            assert!(p > last && p < 1.0 + 1e-12);
            last = p;
        }
        assert!(last > 0.99);
    }

    #[test]
    fn logistic_first_step() {
        let mut e = expert(2, 15, 1.0, 0.1, Likelihood::Logistic);
        let x = [0.3, -0.8];
        let loss = e.correct_logistic(&x, 1.0).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        let phi = e.map().phi(&x).unwrap();
        let c = e.mean().dot(&phi) / phi.norm_squared();
        assert!(c > 0.0);
        assert!((e.mean() - &phi * c).norm() < 1e-12, "mode along φ");
    }

    #[test]
    fn logistic_mode_matches_bisection() {
        // Fresh spherical prior σθ²·I and one label: mode θ = c·φ with
        // c = σθ²·y·(1 − σ(y·c)) since ‖φ‖ = 1.
        for (magnitude, y) in [(1.0, 1.0), (4.0, -1.0), (0.3, 1.0), (50.0, 1.0)] {
            let mut e = expert(1, 15, magnitude, 0.1, Likelihood::Logistic);
            let x = [0.7];
            e.correct_logistic(&x, y).unwrap();
            let phi = e.map().phi(&x).unwrap();
            let h = |c: f64| c - magnitude * y * (1.0 - sigmoid(y * c));
            let (mut lo, mut hi) = (-100.0, 100.0);
            while hi - lo > 1e-12 {
                let mid = 0.5 * (lo + hi);
                if h(mid) > 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let c = 0.5 * (lo + hi);
            let got = e.mean().dot(&phi);
            assert!((got - c).abs() < 1e-7 * (1.0 + magnitude), "σθ²={magnitude}: {got} vs {c}");
        }
    }

    #[test]
    fn logistic_rejects_bad_labels() {
        let mut e = expert(1, 4, 1.0, 0.1, Likelihood::Logistic);
        assert!(e.correct_logistic(&[0.0], 0.0).is_err());
        assert!(e.predict_gauss(&[0.0]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn gaussian_incremental_equals_batch(
            data in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -2.0f64..2.0), 1..40),
            noise in 0.01f64..1.0,
        ) {
            let mut e = expert(2, 12, 1.0, noise, Likelihood::Gaussian);
            let xs: Vec<Vec<f64>> = data.iter().map(|(a, b, _)| vec![*a, *b]).collect();
            let ys: Vec<f64> = data.iter().map(|(_, _, y)| *y).collect();
            let (bm, bc) = batch_posterior(&e, &xs, &ys);
            for (x, y) in xs.iter().zip(&ys) {
                let before = e.predict_gauss(x).unwrap().variance;
                e.correct_gauss(x, *y).unwrap();
                let after = e.predict_gauss(x).unwrap().variance;
                prop_assert!(after <= before + 1e-12);
                prop_assert!(min_eig(e.cov()) >= -1e-10 * e.cov().trace());
            }
            prop_assert!((e.mean() - &bm).norm() <= 1e-6 * bm.norm().max(1e-3));
            prop_assert!((e.cov() - &bc).norm() <= 1e-6 * bc.norm());
        }

        #[test]
        fn logistic_loss_finite_positive_and_psd(
            data in proptest::collection::vec((-5.0f64..5.0, proptest::bool::ANY), 1..30),
            magnitude in 0.01f64..100.0,
        ) {
            let mut e = expert(1, 6, magnitude, 0.1, Likelihood::Logistic);
            for (x, up) in data {
                let y = if up { 1.0 } else { -1.0 };
                let loss = e.correct_logistic(&[x], y).unwrap();
                prop_assert!(loss.is_finite() && loss > 0.0);
                prop_assert!(min_eig(e.cov()) >= -1e-10 * e.cov().trace());
            }
        }
    }
}
