//! Projected gradient ascent with backtracking, shared by the hyperparameter
//! fits and the latent-embedding searches.

use nalgebra::DVector;

#[derive(Debug, Clone, Copy)]
pub struct AscentOptions {
    pub max_iter: usize,
    /// Stop once the gradient norm falls below this.
    pub grad_tol: f64,
    pub initial_step: f64,
    /// Maximum number of halvings per iteration before giving up.
    pub max_backtracks: usize,
}

impl Default for AscentOptions {
    fn default() -> Self {
        AscentOptions {
            max_iter: 200,
            grad_tol: 1e-6,
            initial_step: 1.0,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AscentReport {
    pub x: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    /// Objective after the start point and after every accepted step.
    pub trace: Vec<f64>,
}

/// Maximizes `objective`, which returns the value and gradient at a point (or
/// `None` when the point is infeasible / non-finite). `project` maps a trial
/// point back into the feasible set in place.
///
/// Returns `None` when the objective is not finite at the start point.
pub fn gradient_ascent<F, P>(
    mut objective: F,
    x0: DVector<f64>,
    opts: AscentOptions,
    project: P,
) -> Option<AscentReport>
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
    P: Fn(&mut DVector<f64>),
{
    let mut x = x0;
    project(&mut x);
    let (mut value, mut grad) = objective(&x).filter(|(v, g)| v.is_finite() && g.iter().all(|c| c.is_finite()))?;
    let mut trace = vec![value];
    let mut step = opts.initial_step;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        if grad.norm() <= opts.grad_tol {
            break;
        }
        iterations += 1;
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let mut trial = &x + &grad * step;
            project(&mut trial);
            let moved = (&trial - &x).norm_squared();
            if moved == 0.0 {
                break;
            }
            if let Some((v, g)) = objective(&trial) {
                // Armijo condition on the projected step.
                if v.is_finite() && g.iter().all(|c| c.is_finite()) && v >= value + 1e-4 * moved / step {
                    accepted = Some((trial, v, g));
                    break;
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some((nx, v, g)) => {
                x = nx;
                value = v;
                grad = g;
                trace.push(value);
                step *= 2.0;
            }
            None => break,
        }
    }
    Some(AscentReport {
        x,
        value,
        iterations,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maximizes_concave_quadratic() {
        let target = DVector::from_vec(vec![1.0, -2.0]);
        let f = |x: &DVector<f64>| {
            let d = x - &target;
            Some((-d.norm_squared(), -2.0 * d))
        };
        let r = gradient_ascent(f, DVector::zeros(2), AscentOptions::default(), |_| {}).unwrap();
        assert!((r.x - target).norm() < 1e-6);
        assert!(r.trace.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn respects_projection() {
        let f = |x: &DVector<f64>| Some((x[0], DVector::from_element(1, 1.0)));
        let r = gradient_ascent(f, DVector::zeros(1), AscentOptions::default(), |x| x[0] = x[0].min(3.0)).unwrap();
        assert_eq!(r.x[0], 3.0);
    }

    #[test]
    fn rejects_non_finite_start() {
        let f = |_: &DVector<f64>| Some((f64::NAN, DVector::zeros(1)));
        assert!(gradient_ascent(f, DVector::zeros(1), AscentOptions::default(), |_| {}).is_none());
    }
}
