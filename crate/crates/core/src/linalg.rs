//! Small dense linear-algebra helpers shared by the experts and the latent model.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Rank-one update of an upper-triangular Cholesky factor.
///
/// On entry `RᵀR = A`; on exit `RᵀR = A + v·vᵀ`. Uses Givens-style rotations,
/// `O(n²)` with no allocation beyond the copy of `v`.
pub fn cholesky_update(r: &mut DMatrix<f64>, v: &DVector<f64>) -> Result<()> {
    let n = r.nrows();
    if r.ncols() != n || v.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: v.len(),
        });
    }
    let mut w = v.clone();
    for k in 0..n {
        let rkk = r[(k, k)];
        if rkk <= 0.0 {
            return Err(Error::State(format!(
                "non-positive pivot {rkk} at {k} in Cholesky factor"
            )));
        }
        let wk = w[k];
        let rr = rkk.hypot(wk);
        let c = rr / rkk;
        let s = wk / rkk;
        r[(k, k)] = rr;
        for j in (k + 1)..n {
            let rkj = (r[(k, j)] + s * w[j]) / c;
            w[j] = c * w[j] - s * rkj;
            r[(k, j)] = rkj;
        }
    }
    Ok(())
}

/// Upper-triangular factor `R` with `RᵀR = a`.
pub fn upper_cholesky(a: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::State(format!("matrix of size {n} is not positive definite")))?;
    Ok(chol.l().transpose())
}

/// Solves `RᵀR x = b` for upper-triangular `R`.
pub fn solve_normal(r: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let y = r
        .tr_solve_upper_triangular(b)
        .expect("triangular factor has a positive diagonal");
    r.solve_upper_triangular(&y)
        .expect("triangular factor has a positive diagonal")
}

/// Same as [`solve_normal`] for a matrix right-hand side.
pub fn solve_normal_mat(r: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let y = r
        .tr_solve_upper_triangular(b)
        .expect("triangular factor has a positive diagonal");
    r.solve_upper_triangular(&y)
        .expect("triangular factor has a positive diagonal")
}

/// `‖R⁻ᵀ b‖²`, i.e. `bᵀ(RᵀR)⁻¹b`.
pub fn inverse_quadratic_form(r: &DMatrix<f64>, b: &DVector<f64>) -> f64 {
    r.tr_solve_upper_triangular(b)
        .expect("triangular factor has a positive diagonal")
        .norm_squared()
}

pub fn log_det_from_upper(r: &DMatrix<f64>) -> f64 {
    2.0 * r.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// `(A + Aᵀ)/2` in place.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

/// Numerically stable `log Σ exp(vᵢ)`; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spd(n: usize, seed: u64) -> DMatrix<f64> {
        let g = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 13 + seed as usize) % 11) as f64 / 5.0 - 1.0);
        &g * g.transpose() + DMatrix::identity(n, n)
    }

    #[test]
    fn update_matches_refactorization() {
        let a = spd(8, 3);
        let mut r = upper_cholesky(a.clone()).unwrap();
        let v = DVector::from_fn(8, |i, _| (i as f64 * 0.37).sin());
        cholesky_update(&mut r, &v).unwrap();
        let target = &a + &v * v.transpose();
        let err = (r.transpose() * &r - &target).norm();
        assert!(err <= 1e-12 * target.norm(), "{err}");
        for i in 0..8 {
            assert!(r[(i, i)] > 0.0);
            for j in 0..i {
                assert_eq!(r[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn solves_and_log_det() {
        let a = spd(5, 1);
        let r = upper_cholesky(a.clone()).unwrap();
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5, 0.0, 3.0]);
        let x = solve_normal(&r, &b);
        assert!((&a * &x - &b).norm() < 1e-10);
        let q = inverse_quadratic_form(&r, &b);
        assert!((q - b.dot(&x)).abs() < 1e-10);
        let det = a.clone().determinant();
        assert!((log_det_from_upper(&r) - det.ln()).abs() < 1e-10);
    }

    #[test]
    fn log_sum_exp_edge_cases() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((log_sum_exp(&[0.0, f64::NEG_INFINITY]) - 0.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn repeated_updates_stay_accurate(vs in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 6), 1..20)) {
            let a0 = DMatrix::<f64>::identity(6, 6) * 0.5;
            let mut r = upper_cholesky(a0.clone()).unwrap();
            let mut a = a0;
            for v in vs {
                let v = DVector::from_vec(v);
                cholesky_update(&mut r, &v).unwrap();
                a += &v * v.transpose();
            }
            let err = (r.transpose() * &r - &a).norm();
            prop_assert!(err <= 1e-10 * a.norm());
        }
    }
}
