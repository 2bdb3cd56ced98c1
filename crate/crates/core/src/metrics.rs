//! Evaluation metrics and hindsight benchmark fits.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::expert::gaussian_nll;
use crate::kernels::{FeatureMap, KernelSpec};
use crate::linalg::{solve_normal, upper_cholesky};

/// Unbiased sample variance.
pub fn sample_variance(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Running normalized squared error `(1/t)·Σ_{τ≤t}(y_τ − ŷ_τ)² / s_y²`, with
/// `s_y²` the sample variance of the whole of `y_true`.
pub fn nmse(y_true: &[f64], y_pred: &[f64]) -> Result<Vec<f64>> {
    check_dim(y_true.len(), y_pred.len())?;
    if y_true.len() < 2 {
        return Err(Error::InvalidArgument("need at least two targets".into()));
    }
    let var = sample_variance(y_true);
    if !(var > 0.0) {
        return Err(Error::DegenerateData("targets have zero variance".into()));
    }
    let mut sum = 0.0;
    Ok(y_true
        .iter()
        .zip(y_pred)
        .enumerate()
        .map(|(i, (y, p))| {
            sum += (y - p).powi(2);
            sum / ((i + 1) as f64 * var)
        })
        .collect())
}

/// Per-step Gaussian predictive negative log-likelihood.
pub fn pnll(means: &[f64], variances: &[f64], y_true: &[f64]) -> Result<Vec<f64>> {
    check_dim(means.len(), variances.len())?;
    check_dim(means.len(), y_true.len())?;
    Ok(means
        .iter()
        .zip(variances)
        .zip(y_true)
        .map(|((m, v), y)| gaussian_nll(*y, *m, *v))
        .collect())
}

/// Label predicted from a class-1 probability; ties go to `+1`.
pub fn predicted_label(prob: f64) -> f64 {
    if prob >= 0.5 {
        1.0
    } else {
        -1.0
    }
}

/// Running misclassification rate of probabilistic ±1 predictions.
pub fn cumulative_error(probs: &[f64], labels: &[f64]) -> Result<Vec<f64>> {
    check_dim(probs.len(), labels.len())?;
    let mut wrong = 0usize;
    Ok(probs
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (p, y))| {
            if predicted_label(*p) != *y {
                wrong += 1;
            }
            wrong as f64 / (i + 1) as f64
        })
        .collect())
}

/// Fraction of targets inside `mean ± 1.96·σ`.
pub fn coverage_95(means: &[f64], variances: &[f64], y_true: &[f64]) -> Result<f64> {
    check_dim(means.len(), variances.len())?;
    check_dim(means.len(), y_true.len())?;
    if means.is_empty() {
        return Err(Error::InvalidArgument("empty prediction series".into()));
    }
    let inside = means
        .iter()
        .zip(variances)
        .zip(y_true)
        .filter(|((m, v), y)| (*y - *m).abs() <= 1.96 * v.max(0.0).sqrt())
        .count();
    Ok(inside as f64 / means.len() as f64)
}

/// Leave-one-out 1-nearest-neighbour error of `labels` in the rows of
/// `embeddings`. Ties go to the earliest row.
pub fn lvm_knn_error(embeddings: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    let t = embeddings.nrows();
    check_dim(t, labels.len())?;
    if t < 2 {
        return Err(Error::InvalidArgument("need at least two embeddings".into()));
    }
    let mut wrong = 0usize;
    for i in 0..t {
        let mut best = (f64::INFINITY, usize::MAX);
        for j in 0..t {
            if j == i {
                continue;
            }
            let d = (embeddings.row(i) - embeddings.row(j)).norm_squared();
            if d < best.0 {
                best = (d, j);
            }
        }
        if labels[best.1] != labels[i] {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / t as f64)
}

/// Regularized batch fit of one Gaussian expert in its random-feature span.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkFit {
    pub theta: DVector<f64>,
    /// Per-sample negative log-likelihood under `N(φᵀθ, σ_n²)`.
    pub nll: Vec<f64>,
    /// `‖θ‖² / (2σ_θ²)`.
    pub penalty: f64,
}

impl BenchmarkFit {
    pub fn total_nll(&self) -> f64 {
        self.nll.iter().sum()
    }

    /// The quantity minimized by the fit and used to rank experts.
    pub fn objective(&self) -> f64 {
        self.total_nll() + self.penalty
    }
}

/// Minimizes `Σ NLL(φ(x_τ)ᵀθ; y_τ) + ‖θ‖²/(2σ_θ²)` in closed form:
/// `θ* = (ΦᵀΦ + (σ_n²/σ_θ²)·I)⁻¹ Φᵀy`.
pub fn benchmark_fit(spec: &KernelSpec, map: &FeatureMap, xs: &[Vec<f64>], ys: &[f64]) -> Result<BenchmarkFit> {
    check_dim(xs.len(), ys.len())?;
    let p = map.feature_dim();
    let mut a = DMatrix::identity(p, p) * (spec.noise / spec.magnitude);
    let mut b = DVector::zeros(p);
    let mut phis = Vec::with_capacity(xs.len());
    for (x, y) in xs.iter().zip(ys) {
        let phi = map.phi(x)?;
        a.ger(1.0, &phi, &phi, 1.0);
        b.axpy(*y, &phi, 1.0);
        phis.push(phi);
    }
    let theta = solve_normal(&upper_cholesky(a)?, &b);
    let nll = phis
        .iter()
        .zip(ys)
        .map(|(phi, y)| gaussian_nll(*y, phi.dot(&theta), spec.noise))
        .collect();
    let penalty = theta.norm_squared() / (2.0 * spec.magnitude);
    Ok(BenchmarkFit { theta, nll, penalty })
}

/// Index and fit of the expert with the smallest regularized objective.
pub fn best_benchmark(
    experts: &[(KernelSpec, &FeatureMap)],
    xs: &[Vec<f64>],
    ys: &[f64],
) -> Result<(usize, BenchmarkFit)> {
    let mut best: Option<(usize, BenchmarkFit)> = None;
    for (m, (spec, map)) in experts.iter().enumerate() {
        let fit = benchmark_fit(spec, map, xs, ys)?;
        if best.as_ref().is_none_or(|(_, b)| fit.objective() < b.objective()) {
            best = Some((m, fit));
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("no experts to benchmark".into()))
}

/// Cumulative static regret `Σ_{τ≤t} ℓ_τ − Σ_{τ≤t} NLL_τ(benchmark)`.
pub fn regret_static(ensemble_losses: &[f64], benchmark_nll: &[f64]) -> Result<Vec<f64>> {
    check_dim(ensemble_losses.len(), benchmark_nll.len())?;
    let mut acc = 0.0;
    Ok(ensemble_losses
        .iter()
        .zip(benchmark_nll)
        .map(|(l, b)| {
            acc += l - b;
            acc
        })
        .collect())
}

/// Per-sample comparator losses of the best expert fitted separately on
/// each segment. `boundaries` lists the first index of every segment after
/// the first.
pub fn segment_benchmark_nll(
    experts: &[(KernelSpec, &FeatureMap)],
    xs: &[Vec<f64>],
    ys: &[f64],
    boundaries: &[usize],
) -> Result<Vec<f64>> {
    check_dim(xs.len(), ys.len())?;
    let mut cuts = vec![0];
    cuts.extend_from_slice(boundaries);
    cuts.push(xs.len());
    if cuts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("segment boundaries must be increasing and inside the stream".into()));
    }
    let mut out = Vec::with_capacity(xs.len());
    for w in cuts.windows(2) {
        let (_, fit) = best_benchmark(experts, &xs[w[0]..w[1]], &ys[w[0]..w[1]])?;
        out.extend(fit.nll);
    }
    Ok(out)
}

/// Average switching regret `R^SW(t)/t` against per-segment comparators.
pub fn regret_switching(ensemble_losses: &[f64], segment_nll: &[f64]) -> Result<Vec<f64>> {
    Ok(regret_static(ensemble_losses, segment_nll)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| r / (i + 1) as f64)
        .collect())
}
