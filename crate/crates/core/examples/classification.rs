//! Online binary classification with logistic experts. Kernel magnitudes are
//! fitted by Laplace evidence on a short initialization window.

use iegp::ensemble::{EnsembleState, Mode};
use iegp::expert::Likelihood;
use iegp::harness::run_stream;
use iegp::hyperopt::fit_classification_magnitude;
use iegp::kernels::{expert_seed, rbf_dictionary, sample_feature_map};
use iegp::metrics::cumulative_error;
use iegp::streams::{gen_stream, StreamKind, StreamSpec};
use nalgebra::DMatrix;

fn main() -> iegp::Result<()> {
    let (len, t0, n_rf, seed) = (1000, 100, 15, 7);
    let stream = gen_stream(&StreamSpec { kind: StreamKind::TwoGaussians { separation: 1.5 }, len, noise: 0.0, seed })?;
    let window = DMatrix::from_fn(t0, 2, |i, k| stream.x[i][k]);
    let mut specs = Vec::new();
    for (m, spec) in rbf_dictionary(-2..=2, 1.0, 1.0, 2)?.into_iter().enumerate() {
        let map = sample_feature_map(&spec, n_rf, expert_seed(seed, m))?;
        let fit = fit_classification_magnitude(&window, &stream.y[..t0], &spec, &map)?;
        println!("expert {m}: lengthscale {:.3}, fitted magnitude {:.3}", spec.lengthscale()[0], fit.magnitude);
        specs.push(spec.with_magnitude(fit.magnitude)?);
    }
    let mut ens = EnsembleState::from_dictionary(&specs, n_rf, seed, Likelihood::Logistic, Mode::Static, None)?;
    let run = run_stream(&mut ens, &stream.x[t0..], &stream.y[t0..])?;
    let err = cumulative_error(&run.means, &stream.y[t0..])?;
    println!("cumulative error after {} samples: {:.4}", err.len(), err[err.len() - 1]);
    Ok(())
}
