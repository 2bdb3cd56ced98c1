//! Experiment drivers behind each subcommand.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{debug, info};
use nalgebra::DMatrix;
use serde_json::{json, Value};

use super::config::{ExperimentConfig, Task};
use super::ingest::{CsvSchema, CsvStream, StreamRecord};
use crate::checkpoint::{Checkpoint, ModelState, Standardization};
use crate::ensemble::EnsembleState;
use crate::error::{Error, Result};
use crate::expert::Likelihood;
use crate::harness::{line_chart_svg, static_regret_sweep, switching_regret_sweep, MetricSeries, StaticRegretConfig, SwitchingRegretConfig};
use crate::hyperopt::{fit_classification_magnitude, fit_marginal_likelihood, HyperFitOptions};
use crate::kernels::{expert_seed, sample_feature_map, KernelSpec};
use crate::lvm::{lvm_init, LvmModel};
use crate::metrics::{coverage_95, cumulative_error, lvm_knn_error, nmse, pnll};
use crate::streams::StreamKind;

/// What a finished run produced.
#[derive(Debug, Clone)]
pub struct RunSummary {
    /// Rows in the metrics CSV.
    pub rows: usize,
    pub metrics: PathBuf,
    pub summary: Value,
}

type Chart = (String, Vec<(String, Vec<(f64, f64)>)>);

struct Outcome {
    series: MetricSeries,
    summary: Value,
    chart: Chart,
}

/// Runs the configured experiment and writes every requested artifact.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let out = match cfg.task {
        Task::Regress => supervised(cfg, Likelihood::Gaussian)?,
        Task::Classify => supervised(cfg, Likelihood::Logistic)?,
        Task::Reduce => reduce(cfg)?,
        Task::Regret => regret(cfg)?,
        Task::Switchregret => switch_regret(cfg)?,
    };
    let metrics = &cfg.io.metrics;
    let file = File::create(metrics).map_err(|e| Error::io(metrics, e))?;
    out.series.write_csv(BufWriter::new(file))?;
    let summary = &cfg.io.summary;
    let mut text = serde_json::to_string_pretty(&out.summary).expect("summary is plain data");
    text.push('\n');
    std::fs::write(summary, text).map_err(|e| Error::io(summary, e))?;
    if let Some(svg) = &cfg.io.svg {
        let (title, lines) = &out.chart;
        std::fs::write(svg, line_chart_svg(title, lines)).map_err(|e| Error::io(svg, e))?;
    }
    Ok(RunSummary {
        rows: out.series.rows.len(),
        metrics: metrics.clone(),
        summary: out.summary,
    })
}

/// Named per-step columns kept in memory and carried through checkpoints.
struct Store(Vec<(String, Vec<f64>)>);

impl Store {
    fn new<S: ToString>(names: impl IntoIterator<Item = S>) -> Self {
        Store(names.into_iter().map(|n| (n.to_string(), Vec::new())).collect())
    }

    fn restore(series: Vec<(String, Vec<f64>)>, expected: &Store) -> Result<Self> {
        let names = |s: &[(String, Vec<f64>)]| s.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>();
        if names(&series) != names(&expected.0) {
            return Err(Error::Checkpoint("checkpoint was written by a different task or dictionary".into()));
        }
        Ok(Store(series))
    }

    fn push(&mut self, values: impl IntoIterator<Item = f64>) {
        let mut n = 0;
        for ((_, col), v) in self.0.iter_mut().zip(values) {
            col.push(v);
            n += 1;
        }
        debug_assert_eq!(n, self.0.len());
    }

    fn get(&self, name: &str) -> &[f64] {
        &self.0.iter().find(|(n, _)| n == name).expect("known column").1
    }

    fn len(&self) -> usize {
        self.0.first().map_or(0, |(_, c)| c.len())
    }
}

fn weight_names(m: usize) -> impl Iterator<Item = String> {
    (0..m).map(|i| format!("w{i}"))
}

fn open_input(cfg: &ExperimentConfig, schema: &CsvSchema) -> Result<CsvStream> {
    let path = cfg.io.input.as_deref().ok_or_else(|| Error::Config("no input CSV given".into()))?;
    CsvStream::open(path, schema)
}

fn read_window(stream: &mut CsvStream, t0: usize) -> Result<Vec<StreamRecord>> {
    let window = stream.by_ref().take(t0).collect::<Result<Vec<_>>>()?;
    if window.len() < t0 {
        return Err(Error::Init(format!(
            "input has {} data rows but the initialization window needs {t0} plus at least one more",
            window.len()
        )));
    }
    Ok(window)
}

fn skip_rows(stream: &mut CsvStream, n: u64) -> Result<()> {
    for _ in 0..n {
        stream
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("input ends before the {n} rows the checkpoint consumed")))??;
    }
    Ok(())
}

fn load_checkpoint(cfg: &ExperimentConfig, path: &Path, stream: &mut CsvStream) -> Result<Checkpoint> {
    let ck = Checkpoint::load_for_dictionary(path, cfg.dictionary.len())?;
    skip_rows(stream, ck.rows_consumed)?;
    info!("resuming after {} rows from {}", ck.rows_consumed, path.display());
    Ok(ck)
}

fn save_checkpoint(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<()> {
    if let Some(path) = &cfg.io.checkpoint {
        ck.save(path)?;
        info!("checkpoint written to {}", path.display());
    }
    Ok(())
}

/// `true` once `stop_after` streamed rows have been processed.
fn should_stop(cfg: &ExperimentConfig, streamed: usize) -> bool {
    cfg.io.stop_after.is_some_and(|limit| streamed as u64 >= limit)
}

fn class_label(v: f64, line: u64) -> Result<f64> {
    match v {
        1.0 => Ok(1.0),
        0.0 | -1.0 => Ok(-1.0),
        _ => Err(Error::Parse {
            row: line,
            column: None,
            message: format!("class label must be 0/1 or -1/+1, found {v}"),
        }),
    }
}

fn target(rec: &StreamRecord, likelihood: Likelihood) -> Result<f64> {
    let y = rec.target.expect("supervised schema has a target column");
    match likelihood {
        Likelihood::Gaussian => Ok(y),
        Likelihood::Logistic => class_label(y, rec.line),
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), d, |i, k| rows[i][k])
}

/// Per-expert hyperparameters fitted on the initialization window.
fn fit_dictionary(cfg: &ExperimentConfig, specs: Vec<KernelSpec>, xs: &[Vec<f64>], ys: &[f64], likelihood: Likelihood) -> Result<Vec<KernelSpec>> {
    if !cfg.dictionary.fit {
        return Ok(specs);
    }
    let x = to_matrix(xs);
    specs
        .iter()
        .enumerate()
        .map(|(m, spec)| {
            let map = sample_feature_map(spec, cfg.n_rf, expert_seed(cfg.seed, m))?;
            let fitted = match likelihood {
                Likelihood::Gaussian => fit_marginal_likelihood(&x, ys, spec, &map, HyperFitOptions::default())?.apply(spec)?,
                Likelihood::Logistic => spec.with_magnitude(fit_classification_magnitude(&x, ys, spec, &map)?.magnitude)?,
            };
            debug!("expert {m}: magnitude {:.4e}, noise {:.4e}", fitted.magnitude, fitted.noise);
            Ok(fitted)
        })
        .collect()
}

fn apply(st: &Option<Standardization>, x: &[f64]) -> Vec<f64> {
    st.as_ref().map_or_else(|| x.to_vec(), |s| s.apply(x))
}

fn supervised(cfg: &ExperimentConfig, likelihood: Likelihood) -> Result<Outcome> {
    let schema = CsvSchema {
        target: cfg.io.target.clone(),
        target_required: true,
        aux: None,
    };
    let mut stream = open_input(cfg, &schema)?;
    let d = stream.feature_dim();
    let m = cfg.dictionary.len();
    let fresh = Store::new(["y", "mean", "variance", "loss"].into_iter().map(String::from).chain(weight_names(m)));
    let (mut ens, st, mut store, mut consumed) = match &cfg.io.resume {
        Some(path) => {
            let ck = load_checkpoint(cfg, path, &mut stream)?;
            let ModelState::Ensemble(ens) = ck.model else {
                return Err(Error::Checkpoint("checkpoint holds a latent-variable model".into()));
            };
            let first = &ens.experts()[0];
            if first.likelihood() != likelihood || first.spec().input_dim != d {
                return Err(Error::Checkpoint("checkpoint does not match this task or input width".into()));
            }
            (ens, ck.standardization, Store::restore(ck.series, &fresh)?, ck.rows_consumed)
        }
        None => {
            let window = read_window(&mut stream, cfg.t0)?;
            let raw: Vec<Vec<f64>> = window.iter().map(|r| r.x.clone()).collect();
            let st = cfg.standardize.then(|| Standardization::fit(&raw)).transpose()?;
            let xs: Vec<Vec<f64>> = raw.iter().map(|x| apply(&st, x)).collect();
            let ys = window.iter().map(|r| target(r, likelihood)).collect::<Result<Vec<_>>>()?;
            let specs = fit_dictionary(cfg, cfg.dictionary.specs(d)?, &xs, &ys, likelihood)?;
            let ens = EnsembleState::from_dictionary(&specs, cfg.n_rf, cfg.seed, likelihood, cfg.ensemble_mode(), cfg.expert_drift())?
                .with_shutdown_threshold(cfg.shutdown_threshold);
            (ens, st, fresh, cfg.t0 as u64)
        }
    };
    while !should_stop(cfg, store.len()) {
        let Some(rec) = stream.next() else { break };
        let rec = rec?;
        let y = target(&rec, likelihood)?;
        let step = ens.step(&apply(&st, &rec.x), y)?;
        store.push([y, step.mean, step.variance, step.ensemble_loss].into_iter().chain(step.weights));
        consumed += 1;
    }
    if store.len() == 0 {
        return Err(Error::Init("no rows left after the initialization window".into()));
    }

    let (ys, means, vars, losses) = (store.get("y"), store.get("mean"), store.get("variance"), store.get("loss"));
    let n = ys.len();
    let cum_loss: Vec<f64> = losses
        .iter()
        .scan(0.0, |acc, l| {
            *acc += l;
            Some(*acc)
        })
        .collect();
    let weights: Vec<&[f64]> = weight_names(m).map(|w| store.get(&w)).collect();
    let first_t = consumed - n as u64 + 1;
    let (columns, quality, summary_final, chart_name) = match likelihood {
        Likelihood::Gaussian => {
            let q = nmse(ys, means).unwrap_or_else(|_| vec![f64::NAN; n]);
            let mean_pnll = pnll(means, vars, ys)?.iter().sum::<f64>() / n as f64;
            let fin = json!({
                "nmse": q[n - 1],
                "mean_pnll": mean_pnll,
                "coverage_95": coverage_95(means, vars, ys)?,
                "cumulative_loss": cum_loss[n - 1],
            });
            (["y", "mean", "variance", "loss", "cum_loss", "nmse"], q, fin, "nmse")
        }
        Likelihood::Logistic => {
            let q = cumulative_error(means, ys)?;
            let fin = json!({ "error_rate": q[n - 1], "cumulative_loss": cum_loss[n - 1] });
            (["y", "prob", "variance", "loss", "cum_loss", "error_rate"], q, fin, "error rate")
        }
    };
    let mut series = MetricSeries::new(columns.iter().map(|c| c.to_string()).chain(weight_names(m)));
    for i in 0..n {
        let row = [ys[i], means[i], vars[i], losses[i], cum_loss[i], quality[i]]
            .into_iter()
            .chain(weights.iter().map(|w| w[i]))
            .collect();
        series.push(first_t + i as u64, row)?;
    }
    let chart_points = (0..n).map(|i| ((first_t + i as u64) as f64, quality[i])).collect();
    let dictionary: Vec<&KernelSpec> = ens.experts().iter().map(|e| &**e.spec()).collect();
    let summary = json!({
        "task": cfg.task,
        "rows": n,
        "rows_consumed": consumed,
        "stopped_early": should_stop(cfg, n),
        "input_dim": d,
        "final": summary_final,
        "weights": ens.weights(),
        "active": ens.active_mask(),
        "correct_calls": ens.correct_calls(),
        "dictionary": dictionary,
        "standardization": st.as_ref().map(|s| json!({ "mean": s.mean, "scale": s.scale })),
        "config": cfg,
    });
    let store = store.0;
    save_checkpoint(
        cfg,
        &Checkpoint {
            model: ModelState::Ensemble(ens),
            rows_consumed: consumed,
            standardization: st,
            series: store,
        },
    )?;
    Ok(Outcome {
        series,
        summary,
        chart: (chart_name.to_string(), vec![(chart_name.to_string(), chart_points)]),
    })
}

fn reduce(cfg: &ExperimentConfig) -> Result<Outcome> {
    let schema = CsvSchema {
        target: None,
        target_required: false,
        aux: cfg.io.label.clone(),
    };
    let mut stream = open_input(cfg, &schema)?;
    let out_dim = stream.feature_dim();
    let q = cfg.reduce.latent_dim;
    let m = cfg.dictionary.len();
    let coords = (0..q).map(|k| format!("x{k}"));
    let fresh = Store::new(
        ["label", "m_star", "log_lik", "fallbacks"]
            .into_iter()
            .map(String::from)
            .chain(coords.clone())
            .chain(weight_names(m)),
    );
    // Window labels share the checkpoint with the per-step series under a reserved name.
    let (mut model, st, mut store, mut window_labels, mut consumed): (LvmModel, _, _, Vec<f64>, u64) = match &cfg.io.resume {
        Some(path) => {
            let mut ck = load_checkpoint(cfg, path, &mut stream)?;
            let ModelState::Lvm(model) = ck.model else {
                return Err(Error::Checkpoint("checkpoint holds a scalar-output ensemble".into()));
            };
            if model.output_dim() != out_dim || model.latent_dim() != q {
                return Err(Error::Checkpoint("checkpoint does not match this input width or latent dimension".into()));
            }
            let window = match ck.series.pop() {
                Some((name, v)) if name == "window_label" => v,
                _ => return Err(Error::Checkpoint("checkpoint lacks window labels".into())),
            };
            (model, ck.standardization, Store::restore(ck.series, &fresh)?, window, ck.rows_consumed)
        }
        None => {
            let window = read_window(&mut stream, cfg.t0)?;
            let raw: Vec<Vec<f64>> = window.iter().map(|r| r.x.clone()).collect();
            let st = cfg.standardize.then(|| Standardization::fit(&raw)).transpose()?;
            let ys: Vec<Vec<f64>> = raw.iter().map(|y| apply(&st, y)).collect();
            let specs = cfg.dictionary.specs(q)?;
            let model = lvm_init(&to_matrix(&ys), &specs, cfg.n_rf, cfg.seed, cfg.lvm_options())?;
            let labels = window.iter().map(|r| r.aux.unwrap_or(f64::NAN)).collect();
            (model, st, fresh, labels, cfg.t0 as u64)
        }
    };
    while !should_stop(cfg, store.len()) {
        let Some(rec) = stream.next() else { break };
        let rec = rec?;
        let step = model.embed_step(&apply(&st, &rec.x))?;
        let fallbacks = step.fallback.iter().filter(|f| **f).count() as f64;
        let head = [
            rec.aux.unwrap_or(f64::NAN),
            step.m_star as f64,
            step.log_likelihoods[step.m_star],
            fallbacks,
        ];
        store.push(head.into_iter().chain(step.x_hat.iter().copied()).chain(model.weights()));
        consumed += 1;
    }
    let n = store.len();
    if n == 0 {
        return Err(Error::Init("no rows left after the initialization window".into()));
    }
    let first_t = consumed - n as u64 + 1;
    let mut series = MetricSeries::new(store.0.iter().map(|(name, _)| name.clone()));
    for i in 0..n {
        series.push(first_t + i as u64, store.0.iter().map(|(_, c)| c[i]).collect())?;
    }

    let embeddings = model.embedding_matrix();
    let all_labels: Vec<f64> = window_labels.iter().chain(store.get("label")).copied().collect();
    let knn = if cfg.io.label.is_some() && all_labels.len() == embeddings.nrows() {
        let classes = all_labels
            .iter()
            .map(|&l| {
                (l >= 0.0 && l.fract() == 0.0)
                    .then_some(l as usize)
                    .ok_or_else(|| Error::InvalidArgument(format!("cluster label {l} is not a non-negative integer")))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(lvm_knn_error(&embeddings, &classes)?)
    } else {
        None
    };
    if let Some(path) = &cfg.io.embeddings {
        write_embeddings(path, &embeddings, cfg.io.label.as_ref().map(|_| all_labels.as_slice()))?;
    }
    let log_lik = store.get("log_lik");
    let chart_points = (0..n).map(|i| ((first_t + i as u64) as f64, log_lik[i])).collect();
    let experts: Vec<Value> = model
        .experts()
        .iter()
        .map(|e| json!({ "kernel": e.spec(), "init_objective": e.init_objective() }))
        .collect();
    let summary = json!({
        "task": cfg.task,
        "rows": n,
        "rows_consumed": consumed,
        "stopped_early": should_stop(cfg, n),
        "output_dim": out_dim,
        "latent_dim": q,
        "knn_error": knn,
        "mean_log_lik": log_lik.iter().sum::<f64>() / n as f64,
        "weights": model.weights(),
        "experts": experts,
        "standardization": st.as_ref().map(|s| json!({ "mean": s.mean, "scale": s.scale })),
        "config": cfg,
    });
    let mut saved = store.0;
    saved.push(("window_label".into(), std::mem::take(&mut window_labels)));
    save_checkpoint(
        cfg,
        &Checkpoint {
            model: ModelState::Lvm(model),
            rows_consumed: consumed,
            standardization: st,
            series: saved,
        },
    )?;
    Ok(Outcome {
        series,
        summary,
        chart: ("selected log-likelihood".into(), vec![("log_lik".into(), chart_points)]),
    })
}

fn write_embeddings(path: &Path, emb: &DMatrix<f64>, labels: Option<&[f64]>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut header: Vec<String> = labels.map(|_| "label".to_string()).into_iter().collect();
    header.extend((0..emb.ncols()).map(|k| format!("x{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..emb.nrows() {
        let mut row: Vec<String> = labels.map(|l| l[i].to_string()).into_iter().collect();
        row.extend(emb.row(i).iter().map(f64::to_string));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?
        .flush()
        .map_err(|e| Error::io(path, e))
}

fn seeds(base: u64, runs: u64) -> Vec<u64> {
    (0..runs).map(|i| base.wrapping_add(i)).collect()
}

fn regret(cfg: &ExperimentConfig) -> Result<Outcome> {
    let r = &cfg.regret;
    let dictionary = cfg
        .dictionary
        .specs(1)?
        .iter()
        .map(|s| s.with_noise(r.noise))
        .collect::<Result<Vec<_>>>()?;
    let sweep_cfg = StaticRegretConfig {
        lengths: r.lengths.clone(),
        seeds: seeds(cfg.seed, r.runs),
        dictionary,
        n_rf: cfg.n_rf,
        stream: StreamKind::SinMix { input_var: r.input_var },
        noise: r.noise,
    };
    info!("static regret sweep over {} lengths x {} runs", r.lengths.len(), r.runs);
    let points = static_regret_sweep(&sweep_cfg)?;
    let mut series = MetricSeries::new(["median_regret", "regret_over_log_t", "regret_over_t"]);
    for p in &points {
        let t = p.len as f64;
        series.push(p.len as u64, vec![p.median, p.median / t.ln(), p.median / t])?;
    }
    let chart = points.iter().map(|p| (p.len as f64, p.median)).collect();
    Ok(Outcome {
        series,
        summary: json!({ "task": cfg.task, "sweep": points, "config": cfg }),
        chart: ("median static regret".into(), vec![("regret".into(), chart)]),
    })
}

fn switch_regret(cfg: &ExperimentConfig) -> Result<Outcome> {
    let s = &cfg.switchregret;
    let sweep_cfg = SwitchingRegretConfig {
        lengths: s.lengths.clone(),
        seeds: seeds(cfg.seed, s.runs),
        first: KernelSpec::rbf(s.first_lengthscale, s.magnitude, s.noise, 1)?,
        second: KernelSpec::rbf(s.second_lengthscale, s.magnitude, s.noise, 1)?,
        n_rf: cfg.n_rf,
        noise: s.noise,
        q0: cfg.q0,
    };
    info!("switching regret sweep over {} lengths x {} runs", s.lengths.len(), s.runs);
    let points = switching_regret_sweep(&sweep_cfg)?;
    let mut series = MetricSeries::new(["median_avg_regret", "median_switching_loss", "median_static_loss"]);
    for p in &points {
        series.push(p.len as u64, vec![p.median_avg_regret, p.median_switching_loss, p.median_static_loss])?;
    }
    let chart = points.iter().map(|p| (p.len as f64, p.median_avg_regret)).collect();
    Ok(Outcome {
        series,
        summary: json!({ "task": cfg.task, "sweep": points, "config": cfg }),
        chart: ("median switching regret / T".into(), vec![("avg regret".into(), chart)]),
    })
}
