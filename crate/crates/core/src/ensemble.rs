//! The ensemble meta-learner.
//!
//! Holds a weight per expert (kept in the log domain), fuses per-expert
//! predictive densities into a Gaussian-mixture predictive, and performs the
//! Bayesian weight correction `w′ₘ ∝ wₘ·exp(-lₘ)`. The switching variant
//! inserts a Markov weight prediction between slots; the dynamic variant
//! inflates every expert's covariance before predicting.
//!
//! A time step is `predict` followed by `correct` on the same input. The time
//! update (drift, then weight prediction) is staged once per step, so calling
//! `predict` several times before `correct` does not drift twice.

use std::sync::Arc;

use log::warn;

use crate::error::{check_dim, Error, Result};
use crate::expert::{ExpertState, Likelihood, PredictiveMoments};
use crate::kernels::{expert_seed, sample_feature_map, KernelSpec};
use crate::linalg::log_sum_exp;

/// Weights below this are treated as zero in static mode.
pub const DEFAULT_SHUTDOWN_THRESHOLD: f64 = 1e-16;
/// Default self-transition probability for switching mode.
pub const DEFAULT_Q0: f64 = 0.99;
/// Loss reported when every expert assigns zero likelihood to an observation.
pub const UNDERFLOW_LOSS: f64 = 1e300;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Static,
    /// Markov chain over the active expert with self-transition probability `q0`.
    Switching { q0: f64 },
    /// Random-walk drift inside each expert (drift variance lives on the expert).
    Dynamic,
    SwitchingDynamic { q0: f64 },
}

impl Mode {
    pub fn q0(self) -> Option<f64> {
        match self {
            Mode::Switching { q0 } | Mode::SwitchingDynamic { q0 } => Some(q0),
            _ => None,
        }
    }

    pub fn is_dynamic(self) -> bool {
        matches!(self, Mode::Dynamic | Mode::SwitchingDynamic { .. })
    }

    /// Shutdown only applies when weights cannot be revived.
    pub fn allows_shutdown(self) -> bool {
        self.q0().is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub mean: f64,
    pub variance: f64,
    /// `None` for experts that have been shut down.
    pub per_expert: Vec<Option<PredictiveMoments>>,
    pub weights_used: Vec<f64>,
}

/// Per-step emission consumed by the metrics layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: u64,
    pub mean: f64,
    pub variance: f64,
    pub ensemble_loss: f64,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EnsembleState {
    pub(crate) experts: Vec<ExpertState>,
    pub(crate) log_weights: Vec<f64>,
    pub(crate) mode: Mode,
    pub(crate) shutdown_threshold: f64,
    pub(crate) active: Vec<bool>,
    pub(crate) cum_ensemble_loss: f64,
    pub(crate) cum_expert_loss: Vec<f64>,
    pub(crate) correct_calls: Vec<u64>,
    pub(crate) steps: u64,
    /// Log weights after this step's time update, if it has been applied.
    pub(crate) staged: Option<Vec<f64>>,
}

/// Markov weight prediction with uniform off-diagonal transitions:
/// `w′ₘ = q0·wₘ + (1 − q0)/(M − 1)·Σ_{m′≠m} w_{m′}`.
pub fn predict_weights_switching(weights: &[f64], q0: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&q0) {
        return Err(Error::InvalidArgument(format!("q0 must lie in [0, 1], got {q0}")));
    }
    let m = weights.len();
    if m <= 1 || q0 == 1.0 {
        return Ok(weights.to_vec());
    }
    let total: f64 = weights.iter().sum();
    let share = (1.0 - q0) / (m as f64 - 1.0);
    Ok(weights.iter().map(|w| q0 * w + share * (total - w)).collect())
}

fn normalize_log(log_w: &mut [f64]) {
    let lse = log_sum_exp(log_w);
    for v in log_w.iter_mut() {
        *v -= lse;
    }
}

impl EnsembleState {
    /// Uniform initial weights over `experts`.
    pub fn new(experts: Vec<ExpertState>, mode: Mode) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::InvalidArgument("ensemble needs at least one expert".into()));
        }
        let d = experts[0].spec().input_dim;
        for e in &experts {
            check_dim(d, e.spec().input_dim)?;
        }
        if let Some(q0) = mode.q0() {
            if !(0.0..=1.0).contains(&q0) {
                return Err(Error::InvalidArgument(format!("q0 must lie in [0, 1], got {q0}")));
            }
        }
        if mode.is_dynamic() && experts.iter().any(|e| e.drift().is_none()) {
            return Err(Error::InvalidArgument(
                "dynamic mode requires a drift variance on every expert".into(),
            ));
        }
        let m = experts.len();
        Ok(EnsembleState {
            log_weights: vec![-(m as f64).ln(); m],
            active: vec![true; m],
            cum_expert_loss: vec![0.0; m],
            correct_calls: vec![0; m],
            experts,
            mode,
            shutdown_threshold: DEFAULT_SHUTDOWN_THRESHOLD,
            cum_ensemble_loss: 0.0,
            steps: 0,
            staged: None,
        })
    }

    /// One expert per dictionary entry, expert `m` drawing its features with
    /// [`expert_seed`]`(seed, m)`. `drift` is required by the dynamic modes.
    pub fn from_dictionary(
        specs: &[KernelSpec],
        n_rf: usize,
        seed: u64,
        likelihood: Likelihood,
        mode: Mode,
        drift: Option<f64>,
    ) -> Result<Self> {
        let experts = specs
            .iter()
            .enumerate()
            .map(|(m, spec)| {
                let map = Arc::new(sample_feature_map(spec, n_rf, expert_seed(seed, m))?);
                let e = ExpertState::new(Arc::new(spec.clone()), map, likelihood)?;
                match drift {
                    Some(q) => e.with_drift(q),
                    None => Ok(e),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(experts, mode)
    }

    pub fn with_shutdown_threshold(mut self, threshold: f64) -> Self {
        self.shutdown_threshold = threshold;
        self
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn experts(&self) -> &[ExpertState] {
        &self.experts
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|v| v.exp()).collect()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn active_mask(&self) -> &[bool] {
        &self.active
    }

    pub fn shutdown_threshold(&self) -> f64 {
        self.shutdown_threshold
    }

    /// Number of `correct` calls each expert has received.
    pub fn correct_calls(&self) -> &[u64] {
        &self.correct_calls
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Running sums of the ensemble loss and of each expert's loss. Shut-down
    /// experts stop accumulating.
    pub fn regret_accumulators(&self) -> (f64, Vec<f64>) {
        (self.cum_ensemble_loss, self.cum_expert_loss.clone())
    }

    fn begin_step(&mut self) -> Result<()> {
        if self.staged.is_some() {
            return Ok(());
        }
        if self.mode.is_dynamic() {
            for (e, &on) in self.experts.iter_mut().zip(&self.active) {
                if on {
                    e.drift_propagate();
                }
            }
        }
        let staged = match self.mode.q0() {
            Some(q0) if q0 < 1.0 => {
                let predicted = predict_weights_switching(&self.weights(), q0)?;
                let mut log_w: Vec<f64> = predicted.iter().map(|w| w.ln()).collect();
                normalize_log(&mut log_w);
                log_w
            }
            _ => self.log_weights.clone(),
        };
        self.staged = Some(staged);
        Ok(())
    }

    fn require_active(&self) -> Result<()> {
        if self.active.iter().any(|&a| a) {
            Ok(())
        } else {
            Err(Error::State("all experts have been shut down".into()))
        }
    }

    /// Ensemble predictive moments at `x` (applies this step's time update).
    pub fn predict(&mut self, x: &[f64]) -> Result<EnsemblePrediction> {
        self.require_active()?;
        self.begin_step()?;
        let log_w = self.staged.as_ref().expect("staged by begin_step");
        let weights_used: Vec<f64> = log_w.iter().map(|v| v.exp()).collect();
        let per_expert = self
            .experts
            .iter()
            .zip(&self.active)
            .map(|(e, &on)| if on { e.predict(x).map(Some) } else { Ok(None) })
            .collect::<Result<Vec<_>>>()?;
        let mean: f64 = per_expert
            .iter()
            .zip(&weights_used)
            .filter_map(|(p, w)| p.map(|p| w * p.mean))
            .sum();
        let variance: f64 = per_expert
            .iter()
            .zip(&weights_used)
            .filter_map(|(p, w)| p.map(|p| w * (p.variance + (mean - p.mean).powi(2))))
            .sum();
        Ok(EnsemblePrediction {
            mean,
            variance,
            per_expert,
            weights_used,
        })
    }

    /// Corrects every active expert with `(x, y)` and updates the weights.
    /// Returns the ensemble loss `-log Σ wₘ exp(-lₘ)`.
    pub fn correct(&mut self, x: &[f64], y: f64) -> Result<f64> {
        self.require_active()?;
        self.begin_step()?;
        let base = self.staged.take().expect("staged by begin_step");

        let mut losses = vec![f64::INFINITY; self.len()];
        for (m, e) in self.experts.iter_mut().enumerate() {
            if !self.active[m] {
                continue;
            }
            losses[m] = e.correct(x, y)?;
            self.correct_calls[m] += 1;
        }

        let mut log_w: Vec<f64> = base
            .iter()
            .zip(&losses)
            .zip(&self.active)
            .map(|((w, l), &on)| if on { w - l } else { f64::NEG_INFINITY })
            .collect();
        let lse = log_sum_exp(&log_w);
        let ensemble_loss = if lse.is_finite() {
            for v in log_w.iter_mut() {
                *v -= lse;
            }
            self.log_weights = log_w;
            -lse
        } else {
            warn!(
                "step {}: every expert likelihood underflowed; weights left unchanged",
                self.steps
            );
            self.log_weights = base;
            UNDERFLOW_LOSS
        };

        self.cum_ensemble_loss += ensemble_loss;
        for (m, l) in losses.iter().enumerate() {
            if self.active[m] {
                self.cum_expert_loss[m] += l;
            }
        }
        if self.mode.allows_shutdown() {
            self.apply_shutdown();
        }
        self.steps += 1;
        Ok(ensemble_loss)
    }

    fn apply_shutdown(&mut self) {
        let threshold = self.shutdown_threshold.ln();
        let mut changed = false;
        for m in 0..self.len() {
            if self.active[m] && self.log_weights[m] < threshold {
                self.active[m] = false;
                self.log_weights[m] = f64::NEG_INFINITY;
                changed = true;
            }
        }
        if changed && self.active.iter().any(|&a| a) {
            normalize_log(&mut self.log_weights);
        }
    }

    /// Predict-then-correct on one observation.
    pub fn step(&mut self, x: &[f64], y: f64) -> Result<StepRecord> {
        let t = self.steps + 1;
        let pred = self.predict(x)?;
        let ensemble_loss = self.correct(x, y)?;
        Ok(StepRecord {
            t,
            mean: pred.mean,
            variance: pred.variance,
            ensemble_loss,
            weights: self.weights(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::seeded_rng;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;

    fn experts(lengthscales: &[f64], noise: f64, seed: u64) -> Vec<ExpertState> {
        lengthscales
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let spec = Arc::new(KernelSpec::rbf(l, 1.0, noise, 1).unwrap());
                let map = Arc::new(sample_feature_map(&spec, 20, seed + i as u64).unwrap());
                ExpertState::new(spec, map, Likelihood::Gaussian).unwrap()
            })
            .collect()
    }

    fn stream(t: usize, seed: u64) -> Vec<(f64, f64)> {
        let mut rng = seeded_rng(seed);
        (0..t)
            .map(|_| {
                let x: f64 = rng.random_range(-3.0..3.0);
                (x, (2.0 * x).sin() + (3.0 * x).sin() + rng.random_range(-0.1..0.1))
            })
            .collect()
    }

    /// Expert whose predictive at any x is N(mean, variance) exactly:
    /// zero covariance plus noise = variance, and θ̂ placed so φᵀθ̂ = mean at x.
    fn pinned(mean: f64, variance: f64, x: f64) -> ExpertState {
        let spec = Arc::new(KernelSpec::rbf(1.0, 1.0, variance, 1).unwrap());
        let map = Arc::new(sample_feature_map(&spec, 4, 1).unwrap());
        let phi = map.phi(&[x]).unwrap();
        let theta: DVector<f64> = &phi * (mean / phi.norm_squared());
        ExpertState::from_moments(spec, map, Likelihood::Gaussian, theta, DMatrix::zeros(8, 8)).unwrap()
    }

    #[test]
    fn switching_weight_prediction() {
        assert_eq!(predict_weights_switching(&[0.3, 0.7], 1.0).unwrap(), vec![0.3, 0.7]);
        let w = predict_weights_switching(&[1.0, 0.0], 0.9).unwrap();
        assert!((w[0] - 0.9).abs() < 1e-15 && (w[1] - 0.1).abs() < 1e-15);
        let u = predict_weights_switching(&[0.25; 4], 0.6).unwrap();
        assert!(u.iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert_eq!(predict_weights_switching(&[1.0], 0.5).unwrap(), vec![1.0]);
        assert!(predict_weights_switching(&[0.5, 0.5], 1.5).is_err());
    }

    #[test]
    fn single_expert_mixture_is_degenerate() {
        let mut ens = EnsembleState::new(experts(&[1.0], 0.01, 3), Mode::Static).unwrap();
        let solo = ens.experts()[0].predict(&[0.4]).unwrap();
        let pred = ens.predict(&[0.4]).unwrap();
        assert_eq!(pred.mean, solo.mean);
        assert!((pred.variance - solo.variance).abs() < 1e-15);
        for (x, y) in stream(30, 1) {
            ens.step(&[x], y).unwrap();
        }
        let (cum, per) = ens.regret_accumulators();
        assert!((cum - per[0]).abs() < 1e-9);
    }

    #[test]
    fn two_expert_moments() {
        let x = 0.2;
        let mut ens = EnsembleState::new(vec![pinned(-1.0, 1.01, x), pinned(1.0, 1.01, x)], Mode::Static).unwrap();
        let p = ens.predict(&[x]).unwrap();
        assert!(p.mean.abs() < 1e-12);
        assert!((p.variance - 2.01).abs() < 1e-12);
    }

    #[test]
    fn delta_weights_select_expert() {
        let x = 0.2;
        let mut ens = EnsembleState::new(vec![pinned(0.5, 0.3, x), pinned(2.0, 1.0, x)], Mode::Static).unwrap();
        ens.log_weights = vec![0.0, f64::NEG_INFINITY];
        let p = ens.predict(&[x]).unwrap();
        assert!((p.mean - 0.5).abs() < 1e-12);
        assert!((p.variance - 0.3).abs() < 1e-12);
    }

    #[test]
    fn weight_update_from_likelihoods() {
        // Likelihoods 0.2 and 0.1 at equal prior weights give (2/3, 1/3).
        let x = 0.1;
        // N(y; μ, v) = L ⇒ pick y = μ and v = 1/(2π L²).
        let var = |l: f64| 1.0 / (2.0 * std::f64::consts::PI * l * l);
        let mut ens = EnsembleState::new(vec![pinned(0.0, var(0.2), x), pinned(0.0, var(0.1), x)], Mode::Static).unwrap();
        let loss = ens.correct(&[x], 0.0).unwrap();
        let w = ens.weights();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12 && (w[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((loss + (0.5 * 0.2 + 0.5 * 0.1f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn equal_losses_leave_weights() {
        let x = 0.1;
        let mut ens = EnsembleState::new(vec![pinned(0.3, 0.5, x), pinned(0.3, 0.5, x)], Mode::Static).unwrap();
        ens.correct(&[x], 1.0).unwrap();
        let w = ens.weights();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn invariants_along_a_stream() {
        let mut ens = EnsembleState::new(experts(&[0.1, 0.3, 1.0, 3.0, 10.0], 0.01, 7), Mode::Static).unwrap();
        let m = ens.len() as f64;
        for (x, y) in stream(300, 2) {
            let pred = ens.predict(&[x]).unwrap();
            let weighted: f64 = pred
                .per_expert
                .iter()
                .zip(&pred.weights_used)
                .filter_map(|(p, w)| p.map(|p| w * p.variance))
                .sum();
            assert!(pred.variance >= weighted - 1e-12);
            let before = ens.active.clone();
            let (_, per_before) = ens.regret_accumulators();
            let loss = ens.correct(&[x], y).unwrap();
            let (_, per_after) = ens.regret_accumulators();
            let step_losses: Vec<f64> = (0..ens.len())
                .filter(|&k| before[k])
                .map(|k| per_after[k] - per_before[k])
                .collect();
            let lo = step_losses.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = step_losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(loss >= lo - 1e-9 && loss <= hi + 1e-9);
            let total: f64 = ens.weights().iter().sum();
            assert!((total - 1.0).abs() <= 1e-12);
            for k in 0..ens.len() {
                assert!(before[k] || !ens.active[k], "mask only flips true→false");
            }
        }
        let (cum, per) = ens.regret_accumulators();
        for k in 0..ens.len() {
            if ens.active[k] {
                let gap = cum - per[k] - m.ln() - ens.log_weights[k];
                assert!(gap.abs() < 1e-8, "expert {k}: {gap}");
            }
        }
        let best = per.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(cum - best <= m.ln() + 1e-9);
    }

    #[test]
    fn switching_with_unit_q0_equals_static() {
        let base = experts(&[0.3, 1.0, 3.0], 0.05, 11);
        let mut a = EnsembleState::new(base.clone(), Mode::Static).unwrap().with_shutdown_threshold(0.0);
        let mut b = EnsembleState::new(base, Mode::Switching { q0: 1.0 }).unwrap();
        for (x, y) in stream(100, 3) {
            let ra = a.step(&[x], y).unwrap();
            let rb = b.step(&[x], y).unwrap();
            assert_eq!(ra, rb);
            let bits = |e: &EnsembleState| e.log_weights.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b));
        }
    }

    #[test]
    fn switching_keeps_weights_positive() {
        let mut ens = EnsembleState::new(experts(&[0.05, 1.0, 100.0], 0.01, 5), Mode::Switching { q0: 0.95 }).unwrap();
        for (x, y) in stream(200, 4) {
            ens.step(&[x], y).unwrap();
            assert!(ens.log_weights().iter().all(|w| w.is_finite()));
            assert!(ens.active.iter().all(|&a| a));
        }
    }

    #[test]
    fn dynamic_mode_needs_drift_and_drifts_once_per_step() {
        assert!(EnsembleState::new(experts(&[1.0], 0.1, 1), Mode::Dynamic).is_err());
        let drifting: Vec<ExpertState> = experts(&[1.0], 0.1, 1)
            .into_iter()
            .map(|e| e.with_drift(0.001).unwrap())
            .collect();
        let mut ens = EnsembleState::new(drifting, Mode::SwitchingDynamic { q0: 0.9 }).unwrap();
        let tr0 = ens.experts()[0].cov().trace();
        ens.predict(&[0.0]).unwrap();
        ens.predict(&[0.5]).unwrap();
        let tr1 = ens.experts()[0].cov().trace();
        assert!((tr1 - tr0 - 40.0 * 0.001).abs() < 1e-12);
    }

    #[test]
    fn all_shut_down_is_an_error() {
        let mut ens = EnsembleState::new(experts(&[1.0], 0.1, 1), Mode::Static).unwrap();
        ens.active[0] = false;
        assert!(matches!(ens.predict(&[0.0]), Err(Error::State(_))));
    }
}
