//! Seeded synthetic data streams.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{seeded_rng, KernelSpec, SeededRng};

/// Largest stream (or segment) drawn exactly from a GP prior.
pub const MAX_DENSE_DRAW: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StreamKind {
    /// `y = sin(2x) + sin(3x) + ε` with scalar `x ~ N(0, input_var)`.
    SinMix { input_var: f64 },
    /// A single exact draw from `GP(0, kernel)` at `x ~ N(0, I)`.
    GpDraw { kernel: KernelSpec },
    /// Independent GP draws before and after `switch_at`.
    SwitchingGpDraw {
        first: KernelSpec,
        second: KernelSpec,
        switch_at: usize,
    },
    /// Equiprobable ±1 labels with `x ~ N(±separation·1, I)` in two dimensions.
    TwoGaussians { separation: f64 },
    /// Clustered latents in `latent_dim` dimensions, lifted nonlinearly to
    /// `output_dim` observed channels.
    LatentClusters {
        clusters: usize,
        latent_dim: usize,
        output_dim: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub kind: StreamKind,
    pub len: usize,
    /// Observation noise variance.
    pub noise: f64,
    pub seed: u64,
}

/// A generated stream. Scalar-output kinds fill `x` and `y`; the latent
/// cluster kind fills `x` with the true latents and `observations` with the
/// lifted data. `labels` holds class or cluster indices where they exist.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Stream {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub observations: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Index of the first sample of each segment after the first.
    pub boundaries: Vec<usize>,
}

impl Stream {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Observations as a `T × D` matrix.
    pub fn observation_matrix(&self) -> DMatrix<f64> {
        let d = self.observations.first().map_or(0, Vec::len);
        DMatrix::from_fn(self.observations.len(), d, |i, j| self.observations[i][j])
    }
}

fn normal(rng: &mut SeededRng) -> f64 {
    rng.sample(StandardNormal)
}

fn normal_vec(rng: &mut SeededRng, d: usize) -> Vec<f64> {
    (0..d).map(|_| normal(rng)).collect()
}

/// Exact zero-mean GP draw at `xs`, factorizing the kernel matrix with
/// increasing diagonal jitter until it succeeds.
pub fn gp_draw(kernel: &KernelSpec, xs: &[Vec<f64>], rng: &mut SeededRng) -> Result<Vec<f64>> {
    let n = xs.len();
    if n > MAX_DENSE_DRAW {
        return Err(Error::Config(format!(
            "exact GP draw limited to {MAX_DENSE_DRAW} points, requested {n}"
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel.eval(&xs[i], &xs[j])?;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    let z = DVector::from_fn(n, |_, _| normal(rng));
    let mut jitter = 1e-10 * kernel.magnitude;
    loop {
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(chol) = kj.cholesky() {
            return Ok((chol.l() * z).iter().cloned().collect());
        }
        jitter *= 10.0;
        if jitter > 1e-2 * kernel.magnitude {
            return Err(Error::State("kernel matrix could not be factorized".into()));
        }
    }
}

pub fn gen_stream(spec: &StreamSpec) -> Result<Stream> {
    if spec.len == 0 {
        return Err(Error::InvalidArgument("stream length must be positive".into()));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::InvalidArgument("noise variance must be non-negative".into()));
    }
    let mut rng = seeded_rng(spec.seed);
    let sd = spec.noise.sqrt();
    let t = spec.len;
    let mut out = Stream::default();
    match &spec.kind {
        StreamKind::SinMix { input_var } => {
            if !(*input_var > 0.0) {
                return Err(Error::InvalidArgument("input variance must be positive".into()));
            }
            let scale = input_var.sqrt();
            for _ in 0..t {
                let x = scale * normal(&mut rng);
                let y = (2.0 * x).sin() + (3.0 * x).sin() + sd * normal(&mut rng);
                out.x.push(vec![x]);
                out.y.push(y);
            }
        }
        StreamKind::GpDraw { kernel } => {
            out.x = (0..t).map(|_| normal_vec(&mut rng, kernel.input_dim)).collect();
            let f = gp_draw(kernel, &out.x, &mut rng)?;
            out.y = f.iter().map(|f| f + sd * normal(&mut rng)).collect();
        }
        StreamKind::SwitchingGpDraw {
            first,
            second,
            switch_at,
        } => {
            if *switch_at == 0 || *switch_at >= t {
                return Err(Error::InvalidArgument(format!("switch point {switch_at} outside (0, {t})")));
            }
            if first.input_dim != second.input_dim {
                return Err(Error::DimensionMismatch {
                    expected: first.input_dim,
                    got: second.input_dim,
                });
            }
            out.x = (0..t).map(|_| normal_vec(&mut rng, first.input_dim)).collect();
            let mut f = gp_draw(first, &out.x[..*switch_at], &mut rng)?;
            f.extend(gp_draw(second, &out.x[*switch_at..], &mut rng)?);
            out.y = f.iter().map(|f| f + sd * normal(&mut rng)).collect();
            out.boundaries = vec![*switch_at];
        }
        StreamKind::TwoGaussians { separation } => {
            for _ in 0..t {
                let label = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let x = vec![label * separation + normal(&mut rng), label * separation + normal(&mut rng)];
                out.x.push(x);
                out.y.push(label);
                out.labels.push(usize::from(label > 0.0));
            }
        }
        StreamKind::LatentClusters {
            clusters,
            latent_dim,
            output_dim,
        } => {
            let (k, d, dd) = (*clusters, *latent_dim, *output_dim);
            if k == 0 || d == 0 || dd < d {
                return Err(Error::InvalidArgument(
                    "need at least one cluster and output_dim ≥ latent_dim ≥ 1".into(),
                ));
            }
            // Unit-radius ring of centres in the first two latent axes, lifted by a
            // weak linear map plus random sinusoids.
            let centres: Vec<Vec<f64>> = (0..k)
                .map(|c| {
                    let angle = std::f64::consts::TAU * c as f64 / k as f64;
                    let mut v = vec![0.0; d];
                    v[0] = angle.cos();
                    if d > 1 {
                        v[1] = angle.sin();
                    }
                    v
                })
                .collect();
            let linear = DMatrix::from_fn(dd, d, |_, _| 0.3 * normal(&mut rng) / (d as f64).sqrt());
            let freq = DMatrix::from_fn(dd, d, |_, _| 2.0 * normal(&mut rng));
            let phase: Vec<f64> = (0..dd).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
            for _ in 0..t {
                let c = rng.random_range(0..k);
                let z: Vec<f64> = centres[c].iter().map(|m| m + 0.4 * normal(&mut rng)).collect();
                let zv = DVector::from_column_slice(&z);
                let lin = &linear * &zv;
                let proj = &freq * &zv;
                let obs: Vec<f64> = (0..dd)
                    .map(|j| lin[j] + 1.5 * (proj[j] + phase[j]).sin() + sd * normal(&mut rng))
                    .collect();
                out.x.push(z);
                out.observations.push(obs);
                out.labels.push(c);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: StreamKind, len: usize, noise: f64, seed: u64) -> StreamSpec {
        StreamSpec { kind, len, noise, seed }
    }

    #[test]
    fn sinmix_is_deterministic_and_noise_free_at_zero() {
        let s = spec(StreamKind::SinMix { input_var: 1.0 }, 50, 0.0, 3);
        let a = gen_stream(&s).unwrap();
        assert_eq!(a, gen_stream(&s).unwrap());
        for (x, y) in a.x.iter().zip(&a.y) {
            assert_eq!(*y, (2.0 * x[0]).sin() + (3.0 * x[0]).sin());
        }
        let b = gen_stream(&StreamSpec { seed: 4, ..s }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn gp_draw_covariance_matches_kernel() {
        let kernel = KernelSpec::rbf(0.7, 2.0, 0.01, 1).unwrap();
        let pts = vec![vec![0.0], vec![0.5], vec![2.0]];
        let n = 4000;
        let mut rng = seeded_rng(11);
        let mut acc = DMatrix::<f64>::zeros(3, 3);
        for _ in 0..n {
            let f = DVector::from_vec(gp_draw(&kernel, &pts, &mut rng).unwrap());
            acc += &f * f.transpose();
        }
        acc /= n as f64;
        for i in 0..3 {
            for j in 0..3 {
                let k = kernel.eval(&pts[i], &pts[j]).unwrap();
                let kii = kernel.eval(&pts[i], &pts[i]).unwrap();
                let kjj = kernel.eval(&pts[j], &pts[j]).unwrap();
                // Var(f_i f_j) = k_ii k_jj + k_ij² for jointly Gaussian zero-mean pairs.
                let se = ((kii * kjj + k * k) / n as f64).sqrt();
                assert!((acc[(i, j)] - k).abs() < 3.0 * se, "({i},{j}) {} vs {k}", acc[(i, j)]);
            }
        }
    }

    #[test]
    fn switching_stream_segments() {
        let first = KernelSpec::rbf(0.01, 1.0, 1.0, 1).unwrap();
        let second = KernelSpec::rbf(100.0, 1.0, 1.0, 1).unwrap();
        let kind = StreamKind::SwitchingGpDraw {
            first,
            second,
            switch_at: 100,
        };
        let s = gen_stream(&spec(kind.clone(), 200, 1.0, 1)).unwrap();
        assert_eq!(s.boundaries, vec![100]);
        assert_eq!(s.y.len(), 200);
        let bad = StreamKind::SwitchingGpDraw {
            first: KernelSpec::rbf(1.0, 1.0, 1.0, 1).unwrap(),
            second: KernelSpec::rbf(1.0, 1.0, 1.0, 1).unwrap(),
            switch_at: 200,
        };
        assert!(gen_stream(&spec(bad, 200, 1.0, 1)).is_err());
    }

    #[test]
    fn oversized_dense_draw_is_refused() {
        let kernel = KernelSpec::rbf(1.0, 1.0, 0.1, 1).unwrap();
        let err = gen_stream(&spec(StreamKind::GpDraw { kernel }, MAX_DENSE_DRAW + 1, 0.1, 0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn classification_and_latent_streams() {
        let s = gen_stream(&spec(StreamKind::TwoGaussians { separation: 1.5 }, 400, 0.0, 2)).unwrap();
        assert!(s.y.iter().all(|&y| y == 1.0 || y == -1.0));
        let positives = s.y.iter().filter(|&&y| y > 0.0).count();
        assert!(positives > 150 && positives < 250);

        let kind = StreamKind::LatentClusters {
            clusters: 3,
            latent_dim: 2,
            output_dim: 10,
        };
        let s = gen_stream(&spec(kind, 90, 0.01, 3)).unwrap();
        assert_eq!(s.observation_matrix().shape(), (90, 10));
        assert!(s.labels.iter().all(|&c| c < 3));
    }
}
