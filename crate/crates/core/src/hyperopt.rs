//! Initialization-window hyperparameter fits.
//!
//! Regression experts maximize the random-feature log marginal likelihood
//! `log N(y; 0, σ_θ²ΦΦᵀ + σ_n²I)` over `(log σ_θ², log σ_n²)`, evaluated in the
//! `2·n_rf`-dimensional weight space so the cost is `O(t·n_rf²)`. Classification
//! experts fit only `σ_θ²` against a Laplace-approximate evidence.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::expert::{neg_log_sigmoid, sigmoid};
use crate::kernels::{FeatureMap, KernelSpec};
use crate::linalg::{log_det_from_upper, upper_cholesky};
use crate::optim::{gradient_ascent, AscentOptions};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct HyperFitResult {
    pub magnitude: f64,
    pub noise: f64,
    pub log_marginal: f64,
    pub iterations: usize,
}

impl HyperFitResult {
    /// `spec` with the fitted variances substituted.
    pub fn apply(&self, spec: &KernelSpec) -> Result<KernelSpec> {
        spec.with_magnitude(self.magnitude)?.with_noise(self.noise)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HyperFitOptions {
    pub max_iter: usize,
    pub lower: f64,
    pub upper: f64,
}

impl Default for HyperFitOptions {
    fn default() -> Self {
        HyperFitOptions {
            max_iter: 200,
            lower: 1e-6,
            upper: 1e6,
        }
    }
}

/// Random-feature log marginal likelihood of `D` independent output channels
/// together with its gradients.
#[derive(Debug, Clone)]
pub struct RfEvidence {
    pub value: f64,
    pub grad_log_magnitude: f64,
    pub grad_log_noise: f64,
    /// `∂/∂Φ`, present when requested.
    pub grad_design: Option<DMatrix<f64>>,
}

/// `Σ_j log N(y_j; 0, σ_θ²ΦΦᵀ + σ_n²I)` for the columns `y_j` of `ys`, through
/// the weight-space matrix `A = ΦᵀΦ + (σ_n²/σ_θ²)·I`.
pub fn rf_log_marginal(
    design: &DMatrix<f64>,
    ys: &DMatrix<f64>,
    magnitude: f64,
    noise: f64,
    want_design_grad: bool,
) -> Result<RfEvidence> {
    check_dim(design.nrows(), ys.nrows())?;
    let t = design.nrows() as f64;
    let p = design.ncols();
    let channels = ys.ncols() as f64;
    let ratio = noise / magnitude;
    let mut a = design.transpose() * design;
    for i in 0..p {
        a[(i, i)] += ratio;
    }
    let r = upper_cholesky(a)?;
    let b = design.transpose() * ys;
    let c = crate::linalg::solve_normal_mat(&r, &b);
    let resid = ys - design * &c;
    let c_sq = c.norm_squared();
    let quad = resid.norm_squared() + ratio * c_sq;
    let log_det_a = log_det_from_upper(&r);
    let log_det_k = t * noise.ln() + p as f64 * (magnitude / noise).ln() + log_det_a;
    let value = -0.5 * (quad / noise + channels * (log_det_k + t * LN_2PI));

    let a_inv = crate::linalg::solve_normal_mat(&r, &DMatrix::identity(p, p));
    let tr_a_inv = a_inv.trace();
    let grad_log_noise =
        -0.5 * (-quad / noise + ratio * c_sq / noise + channels * (t - p as f64 + ratio * tr_a_inv));
    let grad_log_magnitude = -0.5 * (-ratio * c_sq / noise + channels * (p as f64 - ratio * tr_a_inv));
    let grad_design = want_design_grad
        .then(|| &resid * c.transpose() / noise - design * &a_inv * channels);
    if !value.is_finite() {
        return Err(Error::ParameterBounds(format!(
            "log marginal not finite at σθ²={magnitude}, σn²={noise}"
        )));
    }
    Ok(RfEvidence {
        value,
        grad_log_magnitude,
        grad_log_noise,
        grad_design,
    })
}

fn as_matrix(xs: &DMatrix<f64>, ys: &[f64]) -> Result<DMatrix<f64>> {
    check_dim(xs.nrows(), ys.len())?;
    Ok(DMatrix::from_column_slice(ys.len(), 1, ys))
}

/// Fits `(σ_θ², σ_n²)` by gradient ascent on the log marginal likelihood,
/// starting from the values in `spec`.
pub fn fit_marginal_likelihood(
    xs: &DMatrix<f64>,
    ys: &[f64],
    spec: &KernelSpec,
    map: &FeatureMap,
    opts: HyperFitOptions,
) -> Result<HyperFitResult> {
    if xs.nrows() < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    if ys.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("targets must be finite".into()));
    }
    let y = as_matrix(xs, ys)?;
    let design = map.design_matrix(xs)?;
    let (lo, hi) = (opts.lower.ln(), opts.upper.ln());
    let clamp = |v: f64| v.clamp(lo, hi);
    let x0 = DVector::from_vec(vec![clamp(spec.magnitude.ln()), clamp(spec.noise.ln())]);
    let objective = |p: &DVector<f64>| {
        let ev = rf_log_marginal(&design, &y, p[0].exp(), p[1].exp(), false).ok()?;
        Some((ev.value, DVector::from_vec(vec![ev.grad_log_magnitude, ev.grad_log_noise])))
    };
    let report = gradient_ascent(
        objective,
        x0,
        AscentOptions {
            max_iter: opts.max_iter,
            grad_tol: 1e-6,
            initial_step: 0.1,
            max_backtracks: 40,
        },
        |p| {
            for v in p.iter_mut() {
                *v = clamp(*v);
            }
        },
    )
    .ok_or_else(|| Error::ParameterBounds("objective not finite at the start point".into()))?;
    Ok(HyperFitResult {
        magnitude: report.x[0].exp(),
        noise: report.x[1].exp(),
        log_marginal: report.value,
        iterations: report.iterations,
    })
}

/// Symmetric `σ(z)(1-σ(z))`: exactly invariant under `z → -z`.
fn logistic_curvature(z: f64) -> f64 {
    let a = z.abs();
    sigmoid(a) * sigmoid(-a)
}

/// Laplace-approximate log evidence of ±1 labels under `θ ~ N(0, magnitude·I)`.
/// Returns the evidence and the number of Newton iterations.
pub fn laplace_log_evidence(design: &DMatrix<f64>, labels: &[f64], magnitude: f64) -> Result<(f64, usize)> {
    check_dim(design.nrows(), labels.len())?;
    let p = design.ncols();
    let mut theta = DVector::zeros(p);
    let objective = |theta: &DVector<f64>| {
        let z = design * theta;
        -z.iter().zip(labels).map(|(z, y)| neg_log_sigmoid(y * z)).sum::<f64>()
            - 0.5 * theta.norm_squared() / magnitude
    };
    let mut iterations = 0;
    let mut current = objective(&theta);
    for _ in 0..100 {
        let z = design * &theta;
        let resid = DVector::from_iterator(labels.len(), z.iter().zip(labels).map(|(z, y)| y * sigmoid(-y * z)));
        let grad = design.transpose() * resid - &theta / magnitude;
        if grad.norm() <= 1e-9 * (1.0 + theta.norm()) {
            break;
        }
        iterations += 1;
        let w = DVector::from_iterator(z.len(), z.iter().map(|&z| logistic_curvature(z)));
        let mut neg_hess = design.transpose() * DMatrix::from_diagonal(&w) * design;
        for i in 0..p {
            neg_hess[(i, i)] += 1.0 / magnitude;
        }
        let step = neg_hess
            .cholesky()
            .ok_or_else(|| Error::State("Laplace Hessian not positive definite".into()))?
            .solve(&grad);
        let mut scale = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let trial = &theta + &step * scale;
            let v = objective(&trial);
            if v >= current {
                theta = trial;
                current = v;
                moved = true;
                break;
            }
            scale *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let z = design * &theta;
    let w = DVector::from_iterator(z.len(), z.iter().map(|&z| logistic_curvature(z)));
    let mut b = design.transpose() * DMatrix::from_diagonal(&w) * design * magnitude;
    for i in 0..p {
        b[(i, i)] += 1.0;
    }
    let log_det = log_det_from_upper(&upper_cholesky(b)?);
    Ok((current - 0.5 * log_det, iterations))
}

/// Fits the kernel magnitude of a logistic expert: a log-spaced grid over
/// `[lower, upper]` followed by golden-section refinement around the best
/// grid point. `spec.noise` is carried through unchanged.
pub fn fit_classification_magnitude(
    xs: &DMatrix<f64>,
    labels: &[f64],
    spec: &KernelSpec,
    map: &FeatureMap,
) -> Result<HyperFitResult> {
    check_dim(xs.nrows(), labels.len())?;
    if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
        return Err(Error::InvalidArgument("labels must be ±1".into()));
    }
    if labels.iter().all(|&y| y == 1.0) || labels.iter().all(|&y| y == -1.0) {
        return Err(Error::DegenerateData("initialization window holds a single class".into()));
    }
    let opts = HyperFitOptions::default();
    let design = map.design_matrix(xs)?;
    let (lo, hi) = (opts.lower.ln(), opts.upper.ln());
    let mut iterations = 0;
    let mut eval = |log_mag: f64| -> Result<f64> {
        let (v, it) = laplace_log_evidence(&design, labels, log_mag.exp())?;
        iterations += it;
        Ok(v)
    };

    const GRID: usize = 25;
    let grid: Vec<f64> = (0..GRID).map(|i| lo + (hi - lo) * i as f64 / (GRID - 1) as f64).collect();
    let values = grid.iter().map(|&g| eval(g)).collect::<Result<Vec<_>>>()?;
    let best = (0..GRID)
        .max_by(|&a, &b| values[a].total_cmp(&values[b]))
        .expect("non-empty grid");
    let (mut best_x, mut best_v) = (grid[best], values[best]);

    let (mut a, mut b) = (grid[best.saturating_sub(1)], grid[(best + 1).min(GRID - 1)]);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (eval(c)?, eval(d)?);
    for _ in 0..40 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = eval(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = eval(d)?;
        }
    }
    for (x, v) in [(c, fc), (d, fd)] {
        if v > best_v {
            best_x = x;
            best_v = v;
        }
    }
    Ok(HyperFitResult {
        magnitude: best_x.exp(),
        noise: spec.noise,
        log_marginal: best_v,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{sample_feature_map, seeded_rng};
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Direct `t × t` evaluation of log N(y; 0, aΦΦᵀ + sI).
    fn dense_log_marginal(design: &DMatrix<f64>, y: &DVector<f64>, a: f64, s: f64) -> f64 {
        let t = design.nrows();
        let k = design * design.transpose() * a + DMatrix::identity(t, t) * s;
        let chol = k.cholesky().unwrap();
        let alpha = chol.solve(y);
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (y.dot(&alpha) + log_det + t as f64 * LN_2PI)
    }

    fn setup(t: usize, n_rf: usize, seed: u64) -> (DMatrix<f64>, KernelSpec, FeatureMap) {
        let spec = KernelSpec::rbf(1.0, 1.0, 0.01, 2).unwrap();
        let map = sample_feature_map(&spec, n_rf, seed).unwrap();
        let mut rng = seeded_rng(seed + 100);
        let xs = DMatrix::from_fn(t, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        (xs, spec, map)
    }

    #[test]
    fn woodbury_matches_dense() {
        let (xs, _, map) = setup(50, 20, 1);
        let design = map.design_matrix(&xs).unwrap();
        let mut rng = seeded_rng(9);
        let y = DVector::from_fn(50, |_, _| rng.sample::<f64, _>(StandardNormal));
        for (a, s) in [(1.0, 0.01), (0.3, 1.5), (20.0, 0.2)] {
            let ev = rf_log_marginal(&design, &DMatrix::from_column_slice(50, 1, y.as_slice()), a, s, false).unwrap();
            let dense = dense_log_marginal(&design, &y, a, s);
            assert!((ev.value - dense).abs() <= 1e-8 * dense.abs().max(1.0), "{} vs {dense}", ev.value);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (xs, _, map) = setup(30, 8, 2);
        let design = map.design_matrix(&xs).unwrap();
        let mut rng = seeded_rng(3);
        let ys = DMatrix::from_fn(30, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (a, s) = (0.7, 0.3);
        let ev = rf_log_marginal(&design, &ys, a, s, true).unwrap();
        let h: f64 = 1e-6;
        let f = |a: f64, s: f64, d: &DMatrix<f64>| rf_log_marginal(d, &ys, a, s, false).unwrap().value;
        let fd_a = (f(a * h.exp(), s, &design) - f(a * (-h).exp(), s, &design)) / (2.0 * h);
        let fd_s = (f(a, s * h.exp(), &design) - f(a, s * (-h).exp(), &design)) / (2.0 * h);
        assert!((fd_a - ev.grad_log_magnitude).abs() < 1e-5 * (1.0 + fd_a.abs()), "{fd_a} {}", ev.grad_log_magnitude);
        assert!((fd_s - ev.grad_log_noise).abs() < 1e-5 * (1.0 + fd_s.abs()), "{fd_s} {}", ev.grad_log_noise);
        let g = ev.grad_design.unwrap();
        for (i, j) in [(0, 0), (5, 3), (29, 15)] {
            let mut dp = design.clone();
            let mut dm = design.clone();
            dp[(i, j)] += h;
            dm[(i, j)] -= h;
            let fd = (f(a, s, &dp) - f(a, s, &dm)) / (2.0 * h);
            assert!((fd - g[(i, j)]).abs() < 1e-5 * (1.0 + fd.abs()), "({i},{j}) {fd} {}", g[(i, j)]);
        }
    }

    #[test]
    fn zero_targets_shrink_magnitude() {
        let (xs, spec, map) = setup(40, 10, 4);
        let fit = fit_marginal_likelihood(&xs, &vec![0.0; 40], &spec, &map, HyperFitOptions::default()).unwrap();
        assert!(fit.magnitude <= spec.magnitude);
        assert!(fit.magnitude < 1e-3, "{}", fit.magnitude);
    }

    #[test]
    fn recovers_simulated_hyperparameters() {
        let (xs, spec, map) = setup(500, 25, 5);
        let design = map.design_matrix(&xs).unwrap();
        let mut rng = seeded_rng(77);
        let theta = DVector::from_fn(50, |_, _| rng.sample::<f64, _>(StandardNormal));
        let f = &design * theta;
        let ys: Vec<f64> = f.iter().map(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        let start = spec.with_magnitude(0.2).unwrap().with_noise(0.2).unwrap();
        let fit = fit_marginal_likelihood(&xs, &ys, &start, &map, HyperFitOptions::default()).unwrap();
        assert!(fit.magnitude > 0.5 && fit.magnitude < 2.0, "{}", fit.magnitude);
        assert!(fit.noise > 0.005 && fit.noise < 0.02, "{}", fit.noise);
    }

    #[test]
    fn fit_is_deterministic_and_monotone() {
        let (xs, spec, map) = setup(60, 10, 6);
        let ys: Vec<f64> = (0..60).map(|i| (xs[(i, 0)] * 2.0).sin()).collect();
        let a = fit_marginal_likelihood(&xs, &ys, &spec, &map, HyperFitOptions::default()).unwrap();
        let b = fit_marginal_likelihood(&xs, &ys, &spec, &map, HyperFitOptions::default()).unwrap();
        assert_eq!(a, b);
        let design = map.design_matrix(&xs).unwrap();
        let y = DMatrix::from_column_slice(60, 1, &ys);
        let start = rf_log_marginal(&design, &y, spec.magnitude, spec.noise, false).unwrap().value;
        assert!(a.log_marginal >= start);
    }

    fn two_clusters(t: usize, sep: f64, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = seeded_rng(seed);
        let labels: Vec<f64> = (0..t).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let xs = DMatrix::from_fn(t, 2, |i, _| labels[i] * sep + 0.3 * rng.sample::<f64, _>(StandardNormal));
        (xs, labels)
    }

    #[test]
    fn classification_magnitude_contracts() {
        let spec = KernelSpec::rbf(2.0, 1.0, 0.01, 2).unwrap();
        let map = sample_feature_map(&spec, 15, 3).unwrap();
        let (xs, labels) = two_clusters(80, 2.0, 1);
        let fit = fit_classification_magnitude(&xs, &labels, &spec, &map).unwrap();
        let design = map.design_matrix(&xs).unwrap();
        let at = |m: f64| laplace_log_evidence(&design, &labels, m).unwrap().0;
        assert!(at(10.0) > at(1e-6));
        assert!(fit.log_marginal >= at(1e-6) && fit.log_marginal >= at(1e6));

        let flipped: Vec<f64> = labels.iter().map(|y| -y).collect();
        let fit2 = fit_classification_magnitude(&xs, &flipped, &spec, &map).unwrap();
        assert_eq!(fit.magnitude, fit2.magnitude);

        let ones = vec![1.0; 80];
        assert!(matches!(
            fit_classification_magnitude(&xs, &ones, &spec, &map),
            Err(Error::DegenerateData(_))
        ));
    }
}
