//! Tracking a slowly drifting function. The dynamic variant lets each
//! expert's posterior diffuse between steps, so old evidence is forgotten.

use iegp::ensemble::{EnsembleState, Mode};
use iegp::expert::Likelihood;
use iegp::kernels::{seeded_rng, KernelSpec};
use rand::Rng;
use rand_distr::StandardNormal;

fn main() -> iegp::Result<()> {
    let spec = KernelSpec::rbf(0.7, 1.0, 0.01, 1)?;
    let mut rng = seeded_rng(5);
    let data: Vec<(f64, f64)> = (0..3000)
        .map(|t| {
            let x: f64 = rng.sample::<f64, _>(StandardNormal);
            let phase = t as f64 / 400.0;
            let noise: f64 = rng.sample(StandardNormal);
            (x, (2.0 * x + phase).sin() + 0.1 * noise)
        })
        .collect();
    for (name, mode, drift) in [("static", Mode::Static, None), ("dynamic", Mode::Dynamic, Some(1e-3))] {
        let mut ens = EnsembleState::from_dictionary(std::slice::from_ref(&spec), 50, 5, Likelihood::Gaussian, mode, drift)?;
        let mut late_sq = 0.0;
        for (t, (x, y)) in data.iter().enumerate() {
            let rec = ens.step(&[*x], *y)?;
            if t >= 2000 {
                late_sq += (rec.mean - y).powi(2);
            }
        }
        println!("{name:8}: mean squared error over the last 1000 steps {:.4}", late_sq / 1000.0);
    }
    Ok(())
}
