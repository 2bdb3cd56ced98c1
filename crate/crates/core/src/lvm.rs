//! Online GP latent-variable model over an ensemble of random-feature experts.
//!
//! Each expert keeps the sufficient statistics of a multi-output RF regression
//! from latents to observations: an upper Cholesky factor `R` with
//! `RᵀR = A = ΦᵀΦ + (σ_n²/σ_θ²)·I` and the cross matrix `B = ΦᵀY`. All `D`
//! output channels share `A`, so the posterior mean of channel `j` at a latent
//! `x` is `b_jᵀA⁻¹φ(x)` and every channel has variance `σ_n²(1 + φᵀA⁻¹φ)`.
//!
//! A new observation is embedded by each expert through MAP search over the
//! latent, warm-started at the embedding of its nearest stored neighbour. The
//! reported embedding comes from the expert with the largest posterior score,
//! while every expert absorbs its own optimum as a rank-one update.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::ann::{AnnConfig, AnnIndex};
use crate::error::{check_dim, Error, Result};
use crate::hyperopt::rf_log_marginal;
use crate::kernels::{expert_seed, sample_feature_map, FeatureMap, KernelSpec};
use crate::linalg::{cholesky_update, log_sum_exp, solve_normal, solve_normal_mat, upper_cholesky};
use crate::optim::{gradient_ascent, AscentOptions};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LvmOptions {
    /// Prior variance `σ_x²` of every latent coordinate.
    pub prior_var: f64,
    /// Also fit `σ_θ²` and `σ_n²` during initialization.
    pub fit_hyperparameters: bool,
    /// Alternating rounds of latent / hyperparameter ascent at initialization.
    pub init_rounds: usize,
    pub init_inner_iter: usize,
    pub embed_max_iter: usize,
    pub embed_grad_tol: f64,
    pub ann: AnnConfig,
}

impl Default for LvmOptions {
    fn default() -> Self {
        LvmOptions {
            prior_var: 1.0,
            fit_hyperparameters: true,
            init_rounds: 20,
            init_inner_iter: 10,
            embed_max_iter: 50,
            embed_grad_tol: 1e-6,
            ann: AnnConfig::default(),
        }
    }
}

/// Sufficient statistics and embeddings of one latent-variable expert.
#[derive(Debug, Clone)]
pub struct LvmExpertState {
    pub(crate) r: DMatrix<f64>,
    pub(crate) b: DMatrix<f64>,
    pub(crate) map: Arc<FeatureMap>,
    pub(crate) spec: KernelSpec,
    pub(crate) embeddings: Vec<DVector<f64>>,
    pub(crate) prior_var: f64,
    pub(crate) init_objective: f64,
}

fn log_prior(x: &DVector<f64>, prior_var: f64) -> f64 {
    -0.5 * (x.norm_squared() / prior_var + x.len() as f64 * (LN_2PI + prior_var.ln()))
}

impl LvmExpertState {
    /// Builds the statistics from latents `xs` (`t × d`) paired with rows of `ys` (`t × D`).
    pub fn from_data(
        spec: KernelSpec,
        map: Arc<FeatureMap>,
        xs: &DMatrix<f64>,
        ys: &DMatrix<f64>,
        prior_var: f64,
    ) -> Result<Self> {
        check_dim(xs.nrows(), ys.nrows())?;
        check_dim(spec.input_dim, map.input_dim())?;
        if !(prior_var > 0.0 && prior_var.is_finite()) {
            return Err(Error::InvalidArgument("prior variance must be positive".into()));
        }
        let design = map.design_matrix(xs)?;
        let mut a = design.transpose() * &design;
        let ratio = spec.noise / spec.magnitude;
        for i in 0..a.nrows() {
            a[(i, i)] += ratio;
        }
        let r = upper_cholesky(a)?;
        let b = design.transpose() * ys;
        let embeddings = xs.row_iter().map(|row| row.transpose()).collect();
        Ok(LvmExpertState {
            r,
            b,
            map,
            spec,
            embeddings,
            prior_var,
            init_objective: f64::NAN,
        })
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn map(&self) -> &Arc<FeatureMap> {
        &self.map
    }

    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn cross_matrix(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn embeddings(&self) -> &[DVector<f64>] {
        &self.embeddings
    }

    pub fn prior_var(&self) -> f64 {
        self.prior_var
    }

    pub fn output_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.input_dim
    }

    /// Penalized marginal likelihood reached during initialization.
    pub fn init_objective(&self) -> f64 {
        self.init_objective
    }

    /// `A` rebuilt from scratch out of the stored embeddings; the reference
    /// the incrementally updated factor should reproduce.
    pub fn recompute_information(&self) -> Result<DMatrix<f64>> {
        let p = self.map.feature_dim();
        let mut a = DMatrix::identity(p, p) * (self.spec.noise / self.spec.magnitude);
        for x in &self.embeddings {
            let phi = self.map.phi(x.as_slice())?;
            a.ger(1.0, &phi, &phi, 1.0);
        }
        Ok(a)
    }

    /// Channel-wise predictive mean and the shared predictive variance at `x`.
    pub fn predict(&self, x: &[f64]) -> Result<(DVector<f64>, f64)> {
        let phi = self.map.phi(x)?;
        let k = solve_normal(&self.r, &phi);
        let mean = self.b.transpose() * &k;
        let var = self.spec.noise * (1.0 + phi.dot(&k));
        Ok((mean, var))
    }

    /// `log N(y; μ(x), v(x)·I) + log N(x; 0, σ_x²I)` and its gradient in `x`,
    /// given `w = A⁻¹B`.
    fn embed_objective(&self, w: &DMatrix<f64>, y: &DVector<f64>, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (phi, jac) = self.map.phi_with_jacobian(x.as_slice())?;
        let k = solve_normal(&self.r, &phi);
        let noise = self.spec.noise;
        let v = noise * (1.0 + phi.dot(&k));
        let resid = y - w.transpose() * &phi;
        let rr = resid.norm_squared();
        let dim = y.len() as f64;
        let loglik = -0.5 * (dim * (LN_2PI + v.ln()) + rr / v);
        let value = loglik + log_prior(x, self.prior_var);
        let dv = 0.5 * (rr / (v * v) - dim / v);
        let g_phi = w * &resid / v + k * (2.0 * noise * dv);
        let grad = jac.transpose() * g_phi - x / self.prior_var;
        Ok((value, grad))
    }

    fn log_likelihood(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        let (mean, var) = self.predict(x.as_slice())?;
        let rr = (y - mean).norm_squared();
        Ok(-0.5 * (y.len() as f64 * (LN_2PI + var.ln()) + rr / var))
    }

    /// MAP latent for `y` starting at `x0`. The flag is set when the search
    /// could not run and `x0` is returned unchanged.
    fn embed(&self, y: &DVector<f64>, x0: &DVector<f64>, opts: &LvmOptions) -> (DVector<f64>, f64, bool) {
        let w = solve_normal_mat(&self.r, &self.b);
        let objective = |x: &DVector<f64>| self.embed_objective(&w, y, x).ok();
        let report = gradient_ascent(
            objective,
            x0.clone(),
            AscentOptions {
                max_iter: opts.embed_max_iter,
                grad_tol: opts.embed_grad_tol,
                initial_step: 0.1,
                max_backtracks: 40,
            },
            |_| {},
        );
        match report {
            Some(r) => (r.x, r.value, false),
            None => (x0.clone(), f64::NEG_INFINITY, true),
        }
    }

    /// Rank-one absorption of the pair `(x, y)`.
    fn absorb(&mut self, x: DVector<f64>, y: &DVector<f64>) -> Result<()> {
        let phi = self.map.phi(x.as_slice())?;
        self.b.ger(1.0, &phi, y, 1.0);
        cholesky_update(&mut self.r, &phi)?;
        self.embeddings.push(x);
        Ok(())
    }
}

/// Outcome of embedding one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedStep {
    pub t: usize,
    pub x_hat: DVector<f64>,
    pub m_star: usize,
    /// Index of the stored observation used as warm start.
    pub neighbor: usize,
    /// `log N(y; μ_m(x̂_m), v_m(x̂_m)·I)` per expert.
    pub log_likelihoods: Vec<f64>,
    /// Embedding objective (likelihood plus latent prior) at each expert's optimum.
    pub objectives: Vec<f64>,
    /// Experts whose search fell back to the warm-start point.
    pub fallback: Vec<bool>,
}

/// Ensemble of latent-variable experts with shared nearest-neighbour index.
#[derive(Debug, Clone)]
pub struct LvmModel {
    pub(crate) experts: Vec<LvmExpertState>,
    pub(crate) log_weights: Vec<f64>,
    pub(crate) ann: AnnIndex,
    pub(crate) center: DVector<f64>,
    pub(crate) selected: Vec<DVector<f64>>,
    pub(crate) options: LvmOptions,
}

/// PCA of the (already centered) rows of `yc` to `d` coordinates with unit
/// sample variance. Fails when `yc` has rank below `d`.
pub fn pca_embed(yc: &DMatrix<f64>, d: usize) -> Result<DMatrix<f64>> {
    let t = yc.nrows();
    let svd = yc.clone().svd(true, false);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let s = &svd.singular_values;
    if s.len() < d || s[d - 1] <= 1e-10 * s[0].max(f64::MIN_POSITIVE) {
        return Err(Error::Init(format!(
            "initialization window has rank below the latent dimension {d}"
        )));
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let scale = (t as f64).sqrt();
    let mut x = DMatrix::zeros(t, d);
    for (k, &col) in order.iter().take(d).enumerate() {
        let mut c = u.column(col).into_owned() * scale;
        let pivot = c.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if pivot < 0.0 {
            c.neg_mut();
        }
        x.set_column(k, &c);
    }
    Ok(x)
}

/// Penalized RF marginal likelihood of `(X, σ_θ², σ_n²)` and its gradient in `X`.
fn init_objective(
    map: &FeatureMap,
    xs: &DMatrix<f64>,
    yc: &DMatrix<f64>,
    magnitude: f64,
    noise: f64,
    prior_var: f64,
    want_x_grad: bool,
) -> Option<(f64, DMatrix<f64>, [f64; 2])> {
    let design = map.design_matrix(xs).ok()?;
    let ev = rf_log_marginal(&design, yc, magnitude, noise, want_x_grad).ok()?;
    let prior: f64 = xs.row_iter().map(|r| log_prior(&r.transpose(), prior_var)).sum();
    let mut gx = DMatrix::zeros(xs.nrows(), xs.ncols());
    if let Some(gd) = ev.grad_design {
        for i in 0..xs.nrows() {
            let xi: Vec<f64> = xs.row(i).iter().cloned().collect();
            let (_, jac) = map.phi_with_jacobian(&xi).ok()?;
            let g = jac.transpose() * gd.row(i).transpose();
            for k in 0..xs.ncols() {
                gx[(i, k)] = g[k] - xs[(i, k)] / prior_var;
            }
        }
    }
    Some((ev.value + prior, gx, [ev.grad_log_magnitude, ev.grad_log_noise]))
}

struct InitFit {
    xs: DMatrix<f64>,
    magnitude: f64,
    noise: f64,
    objective: f64,
    trace: Vec<f64>,
}

fn fit_expert_init(
    map: &FeatureMap,
    spec: &KernelSpec,
    x_init: &DMatrix<f64>,
    yc: &DMatrix<f64>,
    opts: &LvmOptions,
) -> Result<InitFit> {
    let (t, d) = (x_init.nrows(), x_init.ncols());
    let (lo, hi) = (1e-6f64.ln(), 1e6f64.ln());
    let mut xs = x_init.clone();
    let mut log_a = spec.magnitude.ln().clamp(lo, hi);
    let mut log_s = spec.noise.ln().clamp(lo, hi);
    let inner = AscentOptions {
        max_iter: opts.init_inner_iter,
        grad_tol: 1e-6,
        initial_step: 0.01,
        max_backtracks: 40,
    };
    let (mut value, _, _) = init_objective(map, &xs, yc, log_a.exp(), log_s.exp(), opts.prior_var, false)
        .ok_or_else(|| Error::Init("initial objective is not finite".into()))?;
    let mut trace = vec![value];
    for _ in 0..opts.init_rounds {
        let start = value;
        let (a, s) = (log_a.exp(), log_s.exp());
        let latent = |v: &DVector<f64>| {
            let m = DMatrix::from_column_slice(t, d, v.as_slice());
            let (f, g, _) = init_objective(map, &m, yc, a, s, opts.prior_var, true)?;
            Some((f, DVector::from_column_slice(g.as_slice())))
        };
        if let Some(r) = gradient_ascent(latent, DVector::from_column_slice(xs.as_slice()), inner, |_| {}) {
            xs = DMatrix::from_column_slice(t, d, r.x.as_slice());
            value = r.value;
            trace.extend_from_slice(&r.trace[1..]);
        }
        if opts.fit_hyperparameters {
            let hyper = |v: &DVector<f64>| {
                let (f, _, g) = init_objective(map, &xs, yc, v[0].exp(), v[1].exp(), opts.prior_var, false)?;
                Some((f, DVector::from_vec(g.to_vec())))
            };
            let x0 = DVector::from_vec(vec![log_a, log_s]);
            let hyper_opts = AscentOptions {
                initial_step: 0.1,
                ..inner
            };
            if let Some(r) = gradient_ascent(hyper, x0, hyper_opts, |v| {
                for c in v.iter_mut() {
                    *c = c.clamp(lo, hi);
                }
            }) {
                log_a = r.x[0];
                log_s = r.x[1];
                value = r.value;
                trace.extend_from_slice(&r.trace[1..]);
            }
        }
        if value - start <= 1e-9 * value.abs().max(1.0) {
            break;
        }
    }
    Ok(InitFit {
        xs,
        magnitude: log_a.exp(),
        noise: log_s.exp(),
        objective: value,
        trace,
    })
}

/// Initializes one expert per dictionary entry from the window `y0` (`t0 × D`).
///
/// `specs[m].input_dim` is the latent dimension and must agree across entries.
/// Expert `m` draws its features with [`expert_seed`]`(seed, m)`.
pub fn lvm_init(y0: &DMatrix<f64>, specs: &[KernelSpec], n_rf: usize, seed: u64, opts: LvmOptions) -> Result<LvmModel> {
    Ok(lvm_init_traced(y0, specs, n_rf, seed, opts)?.0)
}

/// [`lvm_init`] also returning each expert's objective trace over accepted steps.
pub fn lvm_init_traced(
    y0: &DMatrix<f64>,
    specs: &[KernelSpec],
    n_rf: usize,
    seed: u64,
    opts: LvmOptions,
) -> Result<(LvmModel, Vec<Vec<f64>>)> {
    let first = specs
        .first()
        .ok_or_else(|| Error::InvalidArgument("dictionary is empty".into()))?;
    let d = first.input_dim;
    for s in specs {
        check_dim(d, s.input_dim)?;
    }
    let (t0, dim) = (y0.nrows(), y0.ncols());
    if t0 < d + 1 {
        return Err(Error::Init(format!("need at least {} initial observations, got {t0}", d + 1)));
    }
    if dim == 0 || y0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Init("initial observations must be finite and non-empty".into()));
    }
    if !(opts.prior_var > 0.0 && opts.prior_var.is_finite()) {
        return Err(Error::InvalidArgument("prior variance must be positive".into()));
    }
    let center = y0.row_mean().transpose();
    let mut yc = y0.clone();
    for mut row in yc.row_iter_mut() {
        row -= center.transpose();
    }
    let x_init = pca_embed(&yc, d)?;

    let mut experts = Vec::with_capacity(specs.len());
    let mut traces = Vec::with_capacity(specs.len());
    for (m, spec) in specs.iter().enumerate() {
        let map = Arc::new(sample_feature_map(spec, n_rf, expert_seed(seed, m))?);
        let fit = fit_expert_init(&map, spec, &x_init, &yc, &opts)?;
        let fitted = spec.with_magnitude(fit.magnitude)?.with_noise(fit.noise)?;
        let mut state = LvmExpertState::from_data(fitted, map, &fit.xs, &yc, opts.prior_var)?;
        state.init_objective = fit.objective;
        experts.push(state);
        traces.push(fit.trace);
    }

    let best = (0..experts.len())
        .max_by(|&a, &b| experts[a].init_objective.total_cmp(&experts[b].init_objective).then(b.cmp(&a)))
        .expect("non-empty dictionary");
    let selected = experts[best].embeddings.clone();
    let mut ann = AnnIndex::new(dim, opts.ann)?;
    for row in yc.row_iter() {
        let r: Vec<f64> = row.iter().cloned().collect();
        ann.insert(&r)?;
    }
    let m = experts.len() as f64;
    Ok((
        LvmModel {
            log_weights: vec![-m.ln(); experts.len()],
            experts,
            ann,
            center,
            selected,
            options: opts,
        },
        traces,
    ))
}

impl LvmModel {
    pub fn experts(&self) -> &[LvmExpertState] {
        &self.experts
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|v| v.exp()).collect()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn options(&self) -> &LvmOptions {
        &self.options
    }

    /// Observation mean subtracted before modelling.
    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn ann(&self) -> &AnnIndex {
        &self.ann
    }

    pub fn output_dim(&self) -> usize {
        self.center.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.experts[0].latent_dim()
    }

    /// Number of observations absorbed so far, initialization window included.
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    /// Reported embedding for every observation, one row each.
    pub fn embedding_matrix(&self) -> DMatrix<f64> {
        let d = self.latent_dim();
        DMatrix::from_fn(self.selected.len(), d, |i, k| self.selected[i][k])
    }

    pub fn selected_embeddings(&self) -> &[DVector<f64>] {
        &self.selected
    }

    /// Embeds `y`, absorbs it into every expert and reweights the ensemble.
    pub fn embed_step(&mut self, y: &[f64]) -> Result<EmbedStep> {
        check_dim(self.output_dim(), y.len())?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("observation must be finite".into()));
        }
        let yc = DVector::from_column_slice(y) - &self.center;
        let neighbor = self.ann.query(yc.as_slice())?;

        let m = self.experts.len();
        let mut found = Vec::with_capacity(m);
        let mut log_likelihoods = Vec::with_capacity(m);
        let mut objectives = Vec::with_capacity(m);
        let mut fallback = Vec::with_capacity(m);
        for e in &self.experts {
            let x0 = &e.embeddings[neighbor];
            let (x, value, failed) = e.embed(&yc, x0, &self.options);
            let ll = e.log_likelihood(&yc, &x)?;
            let value = if failed { ll + log_prior(&x, e.prior_var) } else { value };
            if failed {
                log::warn!("embedding search for an expert fell back to its warm start");
            }
            found.push(x);
            log_likelihoods.push(ll);
            objectives.push(value);
            fallback.push(failed);
        }
        let m_star = (0..m)
            .map(|i| (i, self.log_weights[i] + objectives[i]))
            .fold((0, f64::NEG_INFINITY), |best, (i, s)| if s > best.1 { (i, s) } else { best })
            .0;
        let x_hat = found[m_star].clone();

        for (e, x) in self.experts.iter_mut().zip(found) {
            e.absorb(x, &yc)?;
        }
        for (lw, ll) in self.log_weights.iter_mut().zip(&log_likelihoods) {
            *lw += ll;
        }
        let lse = log_sum_exp(&self.log_weights);
        if !lse.is_finite() {
            return Err(Error::State("expert weights collapsed".into()));
        }
        for lw in self.log_weights.iter_mut() {
            *lw -= lse;
        }
        self.ann.insert(yc.as_slice())?;
        self.selected.push(x_hat.clone());
        Ok(EmbedStep {
            t: self.selected.len() - 1,
            x_hat,
            m_star,
            neighbor,
            log_likelihoods,
            objectives,
            fallback,
        })
    }
}
