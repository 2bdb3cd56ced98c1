//! Experiment drivers: stream runners, regret sweeps and artifact writers.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::ensemble::{EnsembleState, Mode};
use crate::error::{check_dim, Error, Result};
use crate::expert::Likelihood;
use crate::kernels::{sample_feature_map, seeded_rng, KernelSpec};
use crate::metrics::{best_benchmark, regret_static, regret_switching, segment_benchmark_nll};
use crate::streams::{gen_stream, StreamKind, StreamSpec};

/// Predict-then-correct trace of an ensemble over a stream.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunTrace {
    /// Predictive mean (regression) or class-1 probability (classification).
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub losses: Vec<f64>,
    pub final_weights: Vec<f64>,
}

pub fn run_stream(ens: &mut EnsembleState, xs: &[Vec<f64>], ys: &[f64]) -> Result<RunTrace> {
    check_dim(xs.len(), ys.len())?;
    let mut trace = RunTrace::default();
    for (x, y) in xs.iter().zip(ys) {
        let rec = ens.step(x, *y)?;
        trace.means.push(rec.mean);
        trace.variances.push(rec.variance);
        trace.losses.push(rec.ensemble_loss);
    }
    trace.final_weights = ens.weights();
    Ok(trace)
}

/// Named numeric columns indexed by step, serialized as CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricSeries {
    pub columns: Vec<String>,
    pub rows: Vec<(u64, Vec<f64>)>,
}

impl MetricSeries {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        MetricSeries {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, t: u64, values: Vec<f64>) -> Result<()> {
        check_dim(self.columns.len(), values.len())?;
        if self.rows.last().is_some_and(|(last, _)| *last >= t) {
            return Err(Error::InvalidArgument("metric rows must have increasing t".into()));
        }
        self.rows.push((t, values));
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|(_, v)| v[i]).collect())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let header = std::iter::once("t").chain(self.columns.iter().map(String::as_str));
        out.write_record(header).map_err(csv_error)?;
        for (t, values) in &self.rows {
            let fields = std::iter::once(t.to_string()).chain(values.iter().map(f64::to_string));
            out.write_record(fields).map_err(csv_error)?;
        }
        out.flush().map_err(|e| Error::io("<metrics>", e))
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io {
        path: "<metrics>".into(),
        source: std::io::Error::other(e),
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticRegretConfig {
    pub lengths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub dictionary: Vec<KernelSpec>,
    pub n_rf: usize,
    pub stream: StreamKind,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub len: usize,
    pub median: f64,
    pub values: Vec<f64>,
}

/// Final static regret of one run of length `len`.
pub fn static_regret_run(cfg: &StaticRegretConfig, len: usize, seed: u64) -> Result<f64> {
    let stream = gen_stream(&StreamSpec {
        kind: cfg.stream.clone(),
        len,
        noise: cfg.noise,
        seed,
    })?;
    let mut ens = EnsembleState::from_dictionary(&cfg.dictionary, cfg.n_rf, seed, Likelihood::Gaussian, Mode::Static, None)?;
    let run = run_stream(&mut ens, &stream.x, &stream.y)?;
    let experts: Vec<_> = ens.experts().iter().map(|e| ((**e.spec()).clone(), &**e.map())).collect();
    let (_, fit) = best_benchmark(&experts, &stream.x, &stream.y)?;
    let regret = regret_static(&run.losses, &fit.nll)?;
    Ok(*regret.last().expect("non-empty stream"))
}

/// Static regret for each stream length, with its median over seeds.
pub fn static_regret_sweep(cfg: &StaticRegretConfig) -> Result<Vec<SweepPoint>> {
    cfg.lengths
        .iter()
        .map(|&len| {
            let values = cfg
                .seeds
                .iter()
                .map(|&seed| static_regret_run(cfg, len, seed))
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepPoint {
                len,
                median: median(&values),
                values,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchingRegretConfig {
    pub lengths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub first: KernelSpec,
    pub second: KernelSpec,
    pub n_rf: usize,
    pub noise: f64,
    pub q0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchingPoint {
    pub len: usize,
    /// Median `R^SW(T)/T` of the switching ensemble.
    pub median_avg_regret: f64,
    pub median_switching_loss: f64,
    pub median_static_loss: f64,
    pub avg_regrets: Vec<f64>,
    pub switching_losses: Vec<f64>,
    pub static_losses: Vec<f64>,
}

/// `(R^SW(T)/T, cumulative switching loss, cumulative static loss)` for one run.
pub fn switching_regret_run(cfg: &SwitchingRegretConfig, len: usize, seed: u64) -> Result<(f64, f64, f64)> {
    let stream = gen_stream(&StreamSpec {
        kind: StreamKind::SwitchingGpDraw {
            first: cfg.first.clone(),
            second: cfg.second.clone(),
            switch_at: len / 2,
        },
        len,
        noise: cfg.noise,
        seed,
    })?;
    let dictionary = [cfg.first.with_noise(cfg.noise)?, cfg.second.with_noise(cfg.noise)?];
    let mut switching = EnsembleState::from_dictionary(
        &dictionary,
        cfg.n_rf,
        seed,
        Likelihood::Gaussian,
        Mode::Switching { q0: cfg.q0 },
        None,
    )?;
    let mut fixed = EnsembleState::from_dictionary(&dictionary, cfg.n_rf, seed, Likelihood::Gaussian, Mode::Static, None)?;
    let sw = run_stream(&mut switching, &stream.x, &stream.y)?;
    let st = run_stream(&mut fixed, &stream.x, &stream.y)?;
    let experts: Vec<_> = switching.experts().iter().map(|e| ((**e.spec()).clone(), &**e.map())).collect();
    let seg = segment_benchmark_nll(&experts, &stream.x, &stream.y, &stream.boundaries)?;
    let avg = regret_switching(&sw.losses, &seg)?;
    Ok((
        *avg.last().expect("non-empty stream"),
        sw.losses.iter().sum(),
        st.losses.iter().sum(),
    ))
}

pub fn switching_regret_sweep(cfg: &SwitchingRegretConfig) -> Result<Vec<SwitchingPoint>> {
    cfg.lengths
        .iter()
        .map(|&len| {
            let runs = cfg
                .seeds
                .iter()
                .map(|&seed| switching_regret_run(cfg, len, seed))
                .collect::<Result<Vec<_>>>()?;
            let avg_regrets: Vec<f64> = runs.iter().map(|r| r.0).collect();
            let switching_losses: Vec<f64> = runs.iter().map(|r| r.1).collect();
            let static_losses: Vec<f64> = runs.iter().map(|r| r.2).collect();
            Ok(SwitchingPoint {
                len,
                median_avg_regret: median(&avg_regrets),
                median_switching_loss: median(&switching_losses),
                median_static_loss: median(&static_losses),
                avg_regrets,
                switching_losses,
                static_losses,
            })
        })
        .collect()
}

/// Median over point pairs of `|φ(x)ᵀφ(x′) − κ̄(x − x′)|` for one feature draw.
/// Pairs are drawn from `N(0, I)` with the given seed.
pub fn rf_approximation_error(spec: &KernelSpec, n_rf: usize, seed: u64, pairs: usize) -> Result<f64> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let map = sample_feature_map(spec, n_rf, seed)?;
    let mut rng = seeded_rng(seed ^ 0x5eed_0f_9a1c);
    let errors = (0..pairs)
        .map(|_| {
            let a: Vec<f64> = (0..spec.input_dim).map(|_| rng.sample(StandardNormal)).collect();
            let b: Vec<f64> = (0..spec.input_dim).map(|_| rng.sample(StandardNormal)).collect();
            Ok((map.kernel_approx(&a, &b)? - spec.standardized(&a, &b)?).abs())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(median(&errors))
}

/// Minimal standalone SVG line chart.
pub fn line_chart_svg(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let points = series.iter().flat_map(|(_, p)| p.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<polyline points="{PAD},{PAD} {PAD},{} {},{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD,
        H - PAD
    );
    let _ = writeln!(svg, r#"<text x="{PAD}" y="{}" text-anchor="middle">{x0:.4}</text>"#, H - PAD + 16.0);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{x1:.4}</text>"#, W - PAD, H - PAD + 16.0);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{y0:.4}</text>"#, PAD - 4.0, H - PAD);
    let _ = writeln!(svg, r#"<text x="{}" y="{PAD}" text-anchor="end">{y1:.4}</text>"#, PAD - 4.0);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, coords.join(" "));
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - PAD - 120.0,
            PAD + 16.0 * i as f64,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
