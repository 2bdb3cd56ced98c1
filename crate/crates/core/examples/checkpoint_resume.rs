//! Saving an ensemble mid-stream and continuing from the file: the resumed
//! run produces bit-identical predictions.

use iegp::checkpoint::{Checkpoint, ModelState};
use iegp::ensemble::{EnsembleState, Mode};
use iegp::expert::Likelihood;
use iegp::kernels::rbf_dictionary;
use iegp::streams::{gen_stream, StreamKind, StreamSpec};

fn main() -> iegp::Result<()> {
    let stream = gen_stream(&StreamSpec { kind: StreamKind::SinMix { input_var: 1.0 }, len: 400, noise: 0.01, seed: 2 })?;
    let dict = rbf_dictionary(-2..=2, 1.0, 0.01, 1)?;
    let fresh = || EnsembleState::from_dictionary(&dict, 30, 2, Likelihood::Gaussian, Mode::Switching { q0: 0.99 }, None);
    let (mut straight, mut first) = (fresh()?, fresh()?);
    for (x, y) in stream.x.iter().zip(&stream.y).take(200) {
        straight.step(x, *y)?;
        first.step(x, *y)?;
    }

    let path = std::env::temp_dir().join("iegp-example.ckpt");
    let ck = Checkpoint { model: ModelState::Ensemble(first), rows_consumed: 200, standardization: None, series: Vec::new() };
    ck.save(&path)?;
    println!("wrote {} bytes to {}", std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0), path.display());
    let ModelState::Ensemble(mut resumed) = Checkpoint::load_for_dictionary(&path, dict.len())?.model else {
        unreachable!("saved an ensemble")
    };
    std::fs::remove_file(&path).ok();

    let mut identical = true;
    for (x, y) in stream.x.iter().zip(&stream.y).skip(200) {
        identical &= straight.step(x, *y)? == resumed.step(x, *y)?;
    }
    println!("resumed run identical to uninterrupted run: {identical}");
    Ok(())
}
