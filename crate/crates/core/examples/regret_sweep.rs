//! Empirical static regret against the best fixed random-feature predictor,
//! as a median over seeds for increasing stream lengths.

use iegp::harness::{static_regret_sweep, StaticRegretConfig};
use iegp::kernels::rbf_dictionary;
use iegp::streams::StreamKind;

fn main() -> iegp::Result<()> {
    let cfg = StaticRegretConfig {
        lengths: vec![100, 200, 400, 800, 1600],
        seeds: (0..5).collect(),
        dictionary: rbf_dictionary(-2..=2, 1.0, 0.01, 1)?,
        n_rf: 50,
        stream: StreamKind::SinMix { input_var: 100.0 },
        noise: 0.01,
    };
    println!("{:>6} {:>10} {:>10} {:>8}", "T", "regret", "R/log T", "R/T");
    for p in static_regret_sweep(&cfg)? {
        let t = p.len as f64;
        println!("{:>6} {:>10.2} {:>10.2} {:>8.4}", p.len, p.median, p.median / t.ln(), p.median / t);
    }
    Ok(())
}
