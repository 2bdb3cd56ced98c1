//! Shift-invariant kernel dictionary entries and their random Fourier feature maps.
//!
//! A [`KernelSpec`] describes a kernel `κ = σ_θ²·κ̄` where `κ̄` is standardized
//! (`κ̄(0) = 1`). A [`FeatureMap`] freezes `n_rf` frequencies drawn from the
//! spectral density of `κ̄`; its feature vector
//!
//! ```text
//! φ(x) = n_rf^{-1/2} [sin(v₁ᵀx), cos(v₁ᵀx), …, sin(v_nᵀx), cos(v_nᵀx)]
//! ```
//!
//! has unit norm and `φ(x)ᵀφ(x′)` is an unbiased estimate of `κ̄(x − x′)`.

use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Seedable generator used everywhere a reproducible stream is needed.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    /// Squared exponential; Gaussian frequencies.
    Rbf,
    /// `exp(-Σ|Δᵢ|/lᵢ)`; Cauchy frequencies.
    Laplace,
    /// `Π 1/(1+(Δᵢ/lᵢ)²)`; Laplacian frequencies.
    Cauchy,
}

impl KernelFamily {
    pub(crate) fn tag(self) -> u8 {
        match self {
            KernelFamily::Rbf => 0,
            KernelFamily::Laplace => 1,
            KernelFamily::Cauchy => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(KernelFamily::Rbf),
            1 => Some(KernelFamily::Laplace),
            2 => Some(KernelFamily::Cauchy),
            _ => None,
        }
    }
}

/// Scalar (isotropic) or per-dimension lengthscale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Lengthscale {
    Isotropic(f64),
    PerDim(Vec<f64>),
}

impl Lengthscale {
    fn broadcast(&self, input_dim: usize) -> Result<Vec<f64>> {
        match self {
            Lengthscale::Isotropic(l) => Ok(vec![*l; input_dim]),
            Lengthscale::PerDim(ls) => {
                check_dim(input_dim, ls.len())?;
                Ok(ls.clone())
            }
        }
    }
}

/// Feature-map seed of dictionary entry `index` in an ensemble seeded with `base`.
pub fn expert_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// RBF dictionary whose squared lengthscales run over `10^k` for `k` in `exponents`.
pub fn rbf_dictionary(
    exponents: impl IntoIterator<Item = i32>,
    magnitude: f64,
    noise: f64,
    input_dim: usize,
) -> Result<Vec<KernelSpec>> {
    exponents
        .into_iter()
        .map(|k| KernelSpec::rbf(10f64.powi(k).sqrt(), magnitude, noise, input_dim))
        .collect()
}

/// One kernel dictionary entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    lengthscale: Vec<f64>,
    /// Kernel magnitude σ_θ².
    pub magnitude: f64,
    /// Observation noise variance σ_n².
    pub noise: f64,
    pub input_dim: usize,
}

impl KernelSpec {
    pub fn new(
        family: KernelFamily,
        lengthscale: Lengthscale,
        magnitude: f64,
        noise: f64,
        input_dim: usize,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be positive".into()));
        }
        let lengthscale = lengthscale.broadcast(input_dim)?;
        let spec = KernelSpec {
            family,
            lengthscale,
            magnitude,
            noise,
            input_dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Isotropic RBF entry, the most common dictionary element.
    pub fn rbf(lengthscale: f64, magnitude: f64, noise: f64, input_dim: usize) -> Result<Self> {
        Self::new(
            KernelFamily::Rbf,
            Lengthscale::Isotropic(lengthscale),
            magnitude,
            noise,
            input_dim,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if self.input_dim == 0 || self.lengthscale.len() != self.input_dim {
            return Err(Error::InvalidArgument(
                "lengthscale length must equal a positive input_dim".into(),
            ));
        }
        if !self.lengthscale.iter().all(|&l| positive(l)) {
            return Err(Error::InvalidArgument("lengthscale must be > 0".into()));
        }
        if !positive(self.magnitude) {
            return Err(Error::InvalidArgument("magnitude must be > 0".into()));
        }
        if !positive(self.noise) {
            return Err(Error::InvalidArgument("noise variance must be > 0".into()));
        }
        Ok(())
    }

    pub fn lengthscale(&self) -> &[f64] {
        &self.lengthscale
    }

    pub fn with_magnitude(&self, magnitude: f64) -> Result<Self> {
        let mut s = self.clone();
        s.magnitude = magnitude;
        s.validate()?;
        Ok(s)
    }

    pub fn with_noise(&self, noise: f64) -> Result<Self> {
        let mut s = self.clone();
        s.noise = noise;
        s.validate()?;
        Ok(s)
    }

    /// Closed-form standardized kernel `κ̄(x − x2)`.
    pub fn standardized(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        check_dim(self.input_dim, x.len())?;
        check_dim(self.input_dim, x2.len())?;
        let scaled = x
            .iter()
            .zip(x2)
            .zip(&self.lengthscale)
            .map(|((a, b), l)| (a - b) / l);
        Ok(match self.family {
            KernelFamily::Rbf => (-0.5 * scaled.map(|u| u * u).sum::<f64>()).exp(),
            KernelFamily::Laplace => (-scaled.map(f64::abs).sum::<f64>()).exp(),
            KernelFamily::Cauchy => scaled.map(|u| 1.0 / (1.0 + u * u)).product(),
        })
    }

    /// Full kernel `σ_θ²·κ̄(x − x2)`.
    pub fn eval(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        Ok(self.magnitude * self.standardized(x, x2)?)
    }
}

/// A frozen sample of spectral frequencies defining `φ(·)` for one expert.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    frequencies: DMatrix<f64>,
    seed: u64,
}

/// Draws `n_rf` i.i.d. frequency vectors from the spectral density of `spec`.
pub fn sample_feature_map(spec: &KernelSpec, n_rf: usize, seed: u64) -> Result<FeatureMap> {
    if n_rf == 0 {
        return Err(Error::InvalidArgument("n_rf must be positive".into()));
    }
    spec.validate()?;
    let d = spec.input_dim;
    let mut rng = seeded_rng(seed);
    let mut frequencies = DMatrix::zeros(n_rf, d);
    for j in 0..n_rf {
        for (k, l) in spec.lengthscale.iter().enumerate() {
            let unit: f64 = match spec.family {
                KernelFamily::Rbf => rng.sample(StandardNormal),
                KernelFamily::Laplace => (PI * (rng.random::<f64>() - 0.5)).tan(),
                KernelFamily::Cauchy => {
                    let a: f64 = rng.sample(Exp1);
                    let b: f64 = rng.sample(Exp1);
                    a - b
                }
            };
            frequencies[(j, k)] = unit / l;
        }
    }
    Ok(FeatureMap { frequencies, seed })
}

impl FeatureMap {
    pub fn from_frequencies(frequencies: DMatrix<f64>, seed: u64) -> Result<Self> {
        if frequencies.nrows() == 0 || frequencies.ncols() == 0 {
            return Err(Error::InvalidArgument("empty frequency matrix".into()));
        }
        Ok(FeatureMap { frequencies, seed })
    }

    pub fn n_rf(&self) -> usize {
        self.frequencies.nrows()
    }

    /// Length of the feature vector, `2·n_rf`.
    pub fn feature_dim(&self) -> usize {
        2 * self.n_rf()
    }

    pub fn input_dim(&self) -> usize {
        self.frequencies.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn frequencies(&self) -> &DMatrix<f64> {
        &self.frequencies
    }

    fn projections(&self, x: &[f64]) -> impl Iterator<Item = f64> + '_ {
        let x = x.to_vec();
        self.frequencies
            .row_iter()
            .map(move |v| v.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>())
    }

    pub fn phi(&self, x: &[f64]) -> Result<DVector<f64>> {
        check_dim(self.input_dim(), x.len())?;
        let scale = 1.0 / (self.n_rf() as f64).sqrt();
        let mut out = DVector::zeros(self.feature_dim());
        for (j, p) in self.projections(x).enumerate() {
            let (s, c) = p.sin_cos();
            out[2 * j] = scale * s;
            out[2 * j + 1] = scale * c;
        }
        Ok(out)
    }

    /// Feature vector together with its Jacobian `∂φ/∂x` (`2·n_rf × d`).
    pub fn phi_with_jacobian(&self, x: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        check_dim(self.input_dim(), x.len())?;
        let scale = 1.0 / (self.n_rf() as f64).sqrt();
        let d = self.input_dim();
        let mut phi = DVector::zeros(self.feature_dim());
        let mut jac = DMatrix::zeros(self.feature_dim(), d);
        for (j, p) in self.projections(x).enumerate() {
            let (s, c) = p.sin_cos();
            phi[2 * j] = scale * s;
            phi[2 * j + 1] = scale * c;
            for k in 0..d {
                let v = self.frequencies[(j, k)];
                jac[(2 * j, k)] = scale * c * v;
                jac[(2 * j + 1, k)] = -scale * s * v;
            }
        }
        Ok((phi, jac))
    }

    /// Stacks `φ(xᵢ)ᵀ` for every row of `xs` (`t × d`) into a `t × 2n_rf` matrix.
    pub fn design_matrix(&self, xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.input_dim(), xs.ncols())?;
        let mut out = DMatrix::zeros(xs.nrows(), self.feature_dim());
        let mut row = vec![0.0; xs.ncols()];
        for i in 0..xs.nrows() {
            for (k, r) in row.iter_mut().enumerate() {
                *r = xs[(i, k)];
            }
            let phi = self.phi(&row)?;
            out.row_mut(i).copy_from(&phi.transpose());
        }
        Ok(out)
    }

    /// Random-feature estimate of `κ̄(x − x2)`.
    pub fn kernel_approx(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        check_dim(self.input_dim(), x2.len())?;
        Ok(self.phi(x)?.dot(&self.phi(x2)?))
    }

    /// Flat little-endian block: `n_rf`, `d`, `seed` (u64 each) then row-major frequencies.
    pub fn write_block<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&(self.n_rf() as u64).to_le_bytes())?;
        w.write_all(&(self.input_dim() as u64).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for j in 0..self.n_rf() {
            for k in 0..self.input_dim() {
                w.write_all(&self.frequencies[(j, k)].to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_block<R: Read>(mut r: R) -> Result<Self> {
        let mut word = [0u8; 8];
        let mut next = |r: &mut R| -> Result<[u8; 8]> {
            r.read_exact(&mut word)
                .map_err(|e| Error::Checkpoint(format!("truncated feature map block: {e}")))?;
            Ok(word)
        };
        let n_rf = u64::from_le_bytes(next(&mut r)?) as usize;
        let d = u64::from_le_bytes(next(&mut r)?) as usize;
        let seed = u64::from_le_bytes(next(&mut r)?);
        if n_rf == 0 || d == 0 || n_rf.saturating_mul(d) > 1 << 28 {
            return Err(Error::Checkpoint(format!("bad feature map shape {n_rf}x{d}")));
        }
        let mut frequencies = DMatrix::zeros(n_rf, d);
        for j in 0..n_rf {
            for k in 0..d {
                frequencies[(j, k)] = f64::from_le_bytes(next(&mut r)?);
            }
        }
        FeatureMap::from_frequencies(frequencies, seed)
    }

    /// CSV rendering of the same block: a header line `n_rf,d,seed` followed by
    /// one row per frequency vector. Floats use round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{},{}\n", self.n_rf(), self.input_dim(), self.seed);
        for row in self.frequencies.row_iter() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let parse_err = |row: u64, message: String| Error::Parse {
            row,
            column: None,
            message,
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| parse_err(0, "missing header".into()))?;
        let head: Vec<&str> = header.split(',').map(str::trim).collect();
        if head.len() != 3 {
            return Err(parse_err(0, "header must be n_rf,d,seed".into()));
        }
        let n_rf: usize = head[0].parse().map_err(|e| parse_err(0, format!("{e}")))?;
        let d: usize = head[1].parse().map_err(|e| parse_err(0, format!("{e}")))?;
        let seed: u64 = head[2].parse().map_err(|e| parse_err(0, format!("{e}")))?;
        let mut values = Vec::with_capacity(n_rf * d);
        for (i, line) in lines.enumerate() {
            let row = i as u64 + 1;
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != d {
                return Err(parse_err(row, format!("expected {d} cells, found {}", cells.len())));
            }
            for c in cells {
                values.push(c.parse::<f64>().map_err(|e| parse_err(row, format!("{e}")))?);
            }
        }
        if values.len() != n_rf * d {
            return Err(parse_err(0, format!("expected {n_rf} frequency rows")));
        }
        FeatureMap::from_frequencies(DMatrix::from_row_slice(n_rf, d, &values), seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rbf(l: f64, d: usize) -> KernelSpec {
        KernelSpec::rbf(l, 1.0, 0.01, d).unwrap()
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(sample_feature_map(&rbf(1.0, 2), 0, 1).is_err());
        assert!(KernelSpec::rbf(-1.0, 1.0, 0.1, 2).is_err());
        assert!(KernelSpec::rbf(1.0, 0.0, 0.1, 2).is_err());
        assert!(KernelSpec::rbf(1.0, 1.0, 0.0, 2).is_err());
        let ard = KernelSpec::new(
            KernelFamily::Rbf,
            Lengthscale::PerDim(vec![1.0, 2.0]),
            1.0,
            0.1,
            3,
        );
        assert!(matches!(ard, Err(Error::DimensionMismatch { .. })));
        let map = sample_feature_map(&rbf(1.0, 2), 4, 1).unwrap();
        assert!(map.phi(&[1.0]).is_err());
        assert!(map.kernel_approx(&[1.0, 0.0], &[0.0]).is_err());
    }

    #[test]
    fn flat_kernel_limit() {
        let map = sample_feature_map(&rbf(1e6, 1), 10, 3).unwrap();
        assert!(map.frequencies().iter().all(|v| v.abs() < 1e-4));
        let k = map.kernel_approx(&[-5.0], &[5.0]).unwrap();
        assert!((k - 1.0).abs() < 1e-6, "{k}");
    }

    #[test]
    fn origin_features() {
        let map = sample_feature_map(&rbf(1.0, 3), 8, 2).unwrap();
        let phi = map.phi(&[0.0, 0.0, 0.0]).unwrap();
        let c = 1.0 / 8f64.sqrt();
        for j in 0..8 {
            assert_eq!(phi[2 * j], 0.0);
            assert!((phi[2 * j + 1] - c).abs() < 1e-15);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        for family in [KernelFamily::Rbf, KernelFamily::Laplace, KernelFamily::Cauchy] {
            let spec = KernelSpec::new(family, Lengthscale::Isotropic(0.7), 1.0, 0.1, 3).unwrap();
            let a = sample_feature_map(&spec, 32, 11).unwrap();
            let b = sample_feature_map(&spec, 32, 11).unwrap();
            let bits = |m: &FeatureMap| m.frequencies().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b));
            let c = sample_feature_map(&spec, 32, 12).unwrap();
            assert_ne!(bits(&a), bits(&c));
        }
    }

    #[test]
    fn gaussian_frequency_moments() {
        // Sample covariance of RBF frequencies with unit lengthscale is the identity.
        let map = sample_feature_map(&rbf(1.0, 2), 10_000, 7).unwrap();
        let f = map.frequencies();
        let n = f.nrows() as f64;
        let mean = f.row_sum() / n;
        for a in 0..2 {
            for b in 0..2 {
                let cov = (0..f.nrows())
                    .map(|i| (f[(i, a)] - mean[a]) * (f[(i, b)] - mean[b]))
                    .sum::<f64>()
                    / (n - 1.0);
                let target = if a == b { 1.0 } else { 0.0 };
                assert!((cov - target).abs() < 0.05, "cov[{a},{b}] = {cov}");
            }
        }
    }

    #[test]
    fn rbf_single_pair_tolerance() {
        // |κ̂ − e^{-1/2}| ≤ 0.1 on at least 95% of seeds at n_rf = 400.
        let spec = rbf(1.0, 2);
        let x = [0.3, -0.2];
        let x2 = [0.3 + 0.6, -0.2 + 0.8];
        let exact = (-0.5f64).exp();
        let hits = (0..200)
            .filter(|&s| {
                let map = sample_feature_map(&spec, 400, s).unwrap();
                (map.kernel_approx(&x, &x2).unwrap() - exact).abs() <= 0.1
            })
            .count();
        assert!(hits >= 190, "{hits}/200");
    }

    #[test]
    fn heavy_tailed_families_match_closed_forms() {
        // Mean over seeds converges to the closed form; 3σ of the seed average.
        let x = [0.4, -0.1];
        let x2 = [-0.3, 0.5];
        for family in [KernelFamily::Laplace, KernelFamily::Cauchy] {
            let spec = KernelSpec::new(family, Lengthscale::Isotropic(1.3), 1.0, 0.1, 2).unwrap();
            let exact = spec.standardized(&x, &x2).unwrap();
            let samples: Vec<f64> = (0..400)
                .map(|s| {
                    sample_feature_map(&spec, 50, 1000 + s)
                        .unwrap()
                        .kernel_approx(&x, &x2)
                        .unwrap()
                })
                .collect();
            let n = samples.len() as f64;
            let mean = samples.iter().sum::<f64>() / n;
            let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let se = (var / n).sqrt();
            assert!((mean - exact).abs() < 3.0 * se + 1e-3, "{family:?}: {mean} vs {exact}");
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let map = sample_feature_map(&rbf(0.8, 3), 6, 5).unwrap();
        let x = [0.2, -0.7, 1.1];
        let (phi, jac) = map.phi_with_jacobian(&x).unwrap();
        assert!((phi - map.phi(&x).unwrap()).norm() < 1e-15);
        let h = 1e-6;
        for k in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            let fd = (map.phi(&xp).unwrap() - map.phi(&xm).unwrap()) / (2.0 * h);
            assert!((fd - jac.column(k)).norm() < 1e-7);
        }
    }

    #[test]
    fn block_round_trips() {
        let spec = KernelSpec::new(
            KernelFamily::Cauchy,
            Lengthscale::PerDim(vec![0.5, 2.0]),
            1.0,
            0.1,
            2,
        )
        .unwrap();
        let map = sample_feature_map(&spec, 5, 99).unwrap();
        let mut buf = Vec::new();
        map.write_block(&mut buf).unwrap();
        assert_eq!(FeatureMap::read_block(&buf[..]).unwrap(), map);
        assert!(FeatureMap::read_block(&buf[..buf.len() - 3]).is_err());
        assert_eq!(FeatureMap::from_csv(&map.to_csv()).unwrap(), map);
    }
}
