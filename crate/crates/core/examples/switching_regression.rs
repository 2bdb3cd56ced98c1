//! A stream whose generating kernel changes half way. The switching ensemble
//! hands weight back to the newly appropriate expert; the static one cannot
//! once the other expert's weight has collapsed.

use iegp::ensemble::{EnsembleState, Mode};
use iegp::expert::Likelihood;
use iegp::harness::run_stream;
use iegp::kernels::KernelSpec;
use iegp::streams::{gen_stream, StreamKind, StreamSpec};

fn main() -> iegp::Result<()> {
    let rough = KernelSpec::rbf(0.05, 1.0, 0.1, 1)?;
    let smooth = KernelSpec::rbf(10.0, 1.0, 0.1, 1)?;
    let len = 1200;
    let stream = gen_stream(&StreamSpec {
        kind: StreamKind::SwitchingGpDraw { first: rough.clone(), second: smooth.clone(), switch_at: len / 2 },
        len,
        noise: 0.1,
        seed: 3,
    })?;
    let dict = [rough, smooth];
    for (name, mode) in [("static", Mode::Static), ("switching", Mode::Switching { q0: 0.99 })] {
        let mut ens = EnsembleState::from_dictionary(&dict, 50, 3, Likelihood::Gaussian, mode, None)?;
        let run = run_stream(&mut ens, &stream.x, &stream.y)?;
        let (before, after) = run.losses.split_at(len / 2);
        println!(
            "{name:9}: loss before switch {:8.1}, after {:8.1}, final weights {:.3?}",
            before.iter().sum::<f64>(),
            after.iter().sum::<f64>(),
            run.final_weights
        );
    }
    Ok(())
}
