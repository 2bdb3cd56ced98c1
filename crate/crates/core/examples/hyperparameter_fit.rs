//! Recovering kernel magnitude and noise variance from a GP draw by ascent on
//! the random-feature marginal likelihood.

use iegp::hyperopt::{fit_marginal_likelihood, HyperFitOptions};
use iegp::kernels::{sample_feature_map, KernelSpec};
use iegp::streams::{gen_stream, StreamKind, StreamSpec};
use nalgebra::DMatrix;

fn main() -> iegp::Result<()> {
    let truth = KernelSpec::rbf(1.0, 2.0, 0.05, 1)?;
    let stream = gen_stream(&StreamSpec {
        kind: StreamKind::GpDraw { kernel: truth.clone() },
        len: 400,
        noise: truth.noise,
        seed: 11,
    })?;
    let xs = DMatrix::from_fn(stream.len(), 1, |i, _| stream.x[i][0]);
    let start = truth.with_magnitude(0.1)?.with_noise(1.0)?;
    let map = sample_feature_map(&start, 200, 11)?;
    let fit = fit_marginal_likelihood(&xs, &stream.y, &start, &map, HyperFitOptions::default())?;
    println!("true      magnitude {:.3}  noise {:.4}", truth.magnitude, truth.noise);
    println!(
        "fitted    magnitude {:.3}  noise {:.4}  (log evidence {:.2}, {} iterations)",
        fit.magnitude, fit.noise, fit.log_marginal, fit.iterations
    );
    Ok(())
}
