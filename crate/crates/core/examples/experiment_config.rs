//! Driving the command-line experiment runner from code: write a synthetic
//! CSV, describe the run in TOML, and collect the artifacts.
//!
//! The printed TOML is a valid `--config` file for the `iegp` binary.

use iegp::cli::{run, ExperimentConfig};
use iegp::streams::{gen_stream, StreamKind, StreamSpec};

fn main() -> iegp::Result<()> {
    let dir = std::env::temp_dir().join("iegp-example-run");
    std::fs::create_dir_all(&dir).map_err(|e| iegp::Error::Config(e.to_string()))?;
    let stream = gen_stream(&StreamSpec { kind: StreamKind::SinMix { input_var: 1.0 }, len: 600, noise: 0.01, seed: 3 })?;
    let mut csv = String::from("x,y\n");
    for (x, y) in stream.x.iter().zip(&stream.y) {
        csv += &format!("{},{y}\n", x[0]);
    }
    let input = dir.join("sinmix.csv");
    std::fs::write(&input, csv).map_err(|e| iegp::Error::Config(e.to_string()))?;

    let text = format!(
        "mode = \"switching\"\nq0 = 0.99\nn_rf = 50\nt0 = 100\nseed = 3\n\n[dictionary]\nexponents = [-2, -1, 0, 1, 2]\n\n[io]\ninput = {input:?}\nmetrics = {:?}\nsummary = {:?}\nsvg = {:?}\n",
        dir.join("metrics.csv"),
        dir.join("summary.json"),
        dir.join("nmse.svg"),
    );
    println!("{text}");
    let cfg = ExperimentConfig::from_toml(&text)?;
    let out = run(&cfg)?;
    println!("{} metric rows in {}", out.rows, out.metrics.display());
    println!("final: {}", out.summary["final"]);
    Ok(())
}
