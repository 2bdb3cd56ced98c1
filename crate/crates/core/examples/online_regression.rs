//! Static ensemble regression on a sinusoid mixture: weights concentrate on
//! the best lengthscale while the running NMSE falls.

use iegp::ensemble::{EnsembleState, Mode};
use iegp::expert::Likelihood;
use iegp::harness::run_stream;
use iegp::kernels::rbf_dictionary;
use iegp::metrics::{coverage_95, nmse};
use iegp::streams::{gen_stream, StreamKind, StreamSpec};

fn main() -> iegp::Result<()> {
    let stream = gen_stream(&StreamSpec {
        kind: StreamKind::SinMix { input_var: 1.0 },
        len: 1000,
        noise: 0.01,
        seed: 1,
    })?;
    let dict = rbf_dictionary(-3..=3, 1.0, 0.01, 1)?;
    let mut ens = EnsembleState::from_dictionary(&dict, 50, 1, Likelihood::Gaussian, Mode::Static, None)?;
    let run = run_stream(&mut ens, &stream.x, &stream.y)?;

    let err = nmse(&stream.y, &run.means)?;
    for t in [10, 100, 500, 1000] {
        println!("t={t:5}  running NMSE {:.4}", err[t - 1]);
    }
    println!("95% coverage {:.3}", coverage_95(&run.means, &run.variances, &stream.y)?);
    for (spec, w) in dict.iter().zip(ens.weights()) {
        println!("lengthscale {:8.4}  weight {w:.3e}", spec.lengthscale()[0]);
    }
    Ok(())
}
