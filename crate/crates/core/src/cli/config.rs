//! Experiment configuration: a TOML file whose fields can be overridden by flags.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::ann::{AnnBackend, AnnConfig};
use crate::ensemble::{Mode, DEFAULT_Q0, DEFAULT_SHUTDOWN_THRESHOLD};
use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelSpec, Lengthscale};
use crate::lvm::LvmOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regress,
    Classify,
    Reduce,
    Regret,
    Switchregret,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Static,
    Switching,
    Dynamic,
    SwitchingDynamic,
}

/// An explicit dictionary entry. The input dimension comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelEntry {
    #[serde(default = "default_family")]
    pub family: KernelFamily,
    pub lengthscale: Lengthscale,
    #[serde(default = "one")]
    pub magnitude: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_family() -> KernelFamily {
    KernelFamily::Rbf
}

fn one() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    0.1
}

/// Kernel dictionary. Without explicit `kernels`, one entry per exponent `k`
/// with squared lengthscale `10^k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DictionaryConfig {
    pub family: KernelFamily,
    pub exponents: Vec<i32>,
    pub magnitude: f64,
    pub noise: f64,
    /// Fit magnitude (and noise, for regression) on the initialization window.
    pub fit: bool,
    pub kernels: Vec<KernelEntry>,
}

impl Default for DictionaryConfig {
    fn default() -> Self {
        DictionaryConfig {
            family: KernelFamily::Rbf,
            exponents: (-4..=6).collect(),
            magnitude: 1.0,
            noise: 0.1,
            fit: true,
            kernels: Vec::new(),
        }
    }
}

impl DictionaryConfig {
    pub fn len(&self) -> usize {
        if self.kernels.is_empty() {
            self.exponents.len()
        } else {
            self.kernels.len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn specs(&self, input_dim: usize) -> Result<Vec<KernelSpec>> {
        if self.kernels.is_empty() {
            self.exponents
                .iter()
                .map(|&k| {
                    let l = 10f64.powi(k).sqrt();
                    KernelSpec::new(self.family, Lengthscale::Isotropic(l), self.magnitude, self.noise, input_dim)
                })
                .collect()
        } else {
            self.kernels
                .iter()
                .map(|e| KernelSpec::new(e.family, e.lengthscale.clone(), e.magnitude, e.noise, input_dim))
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    pub input: Option<PathBuf>,
    pub metrics: PathBuf,
    pub summary: PathBuf,
    pub svg: Option<PathBuf>,
    /// Where to write the final state.
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Stop after this many streamed rows (useful with `checkpoint`).
    pub stop_after: Option<u64>,
    /// Target column name; the last column when absent.
    pub target: Option<String>,
    /// Class-label column used only for evaluation in the reduction task.
    pub label: Option<String>,
    /// Export of the full embedding matrix (reduction task).
    pub embeddings: Option<PathBuf>,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig {
            input: None,
            metrics: "metrics.csv".into(),
            summary: "summary.json".into(),
            svg: None,
            checkpoint: None,
            resume: None,
            stop_after: None,
            target: None,
            label: None,
            embeddings: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReduceConfig {
    pub latent_dim: usize,
    pub prior_var: f64,
    pub init_rounds: usize,
    pub init_inner_iter: usize,
    pub embed_max_iter: usize,
    pub ann: AnnBackend,
    pub max_degree: usize,
    pub ef: usize,
}

impl Default for ReduceConfig {
    fn default() -> Self {
        let o = LvmOptions::default();
        ReduceConfig {
            latent_dim: 2,
            prior_var: o.prior_var,
            init_rounds: o.init_rounds,
            init_inner_iter: o.init_inner_iter,
            embed_max_iter: o.embed_max_iter,
            ann: o.ann.backend,
            max_degree: o.ann.max_degree,
            ef: o.ann.ef,
        }
    }
}

/// Static regret sweep on the synthetic sinusoid-mixture stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegretConfig {
    pub lengths: Vec<usize>,
    pub runs: u64,
    pub input_var: f64,
    pub noise: f64,
}

impl Default for RegretConfig {
    fn default() -> Self {
        RegretConfig {
            lengths: vec![100, 200, 400, 800, 1600],
            runs: 11,
            input_var: 1.0,
            noise: 0.01,
        }
    }
}

/// Switching regret sweep on a stream that changes GP prior half way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwitchRegretConfig {
    pub lengths: Vec<usize>,
    pub runs: u64,
    pub first_lengthscale: f64,
    pub second_lengthscale: f64,
    pub magnitude: f64,
    pub noise: f64,
}

impl Default for SwitchRegretConfig {
    fn default() -> Self {
        SwitchRegretConfig {
            lengths: vec![500, 1000, 2000, 4000],
            runs: 11,
            first_lengthscale: 0.01,
            second_lengthscale: 100.0,
            magnitude: 1.0,
            noise: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub mode: ModeName,
    pub q0: f64,
    /// Random-walk variance of the dynamic modes.
    pub drift: Option<f64>,
    pub shutdown_threshold: f64,
    pub n_rf: usize,
    /// Rows reserved for initialization.
    pub t0: usize,
    pub seed: u64,
    pub standardize: bool,
    pub dictionary: DictionaryConfig,
    pub io: IoConfig,
    pub reduce: ReduceConfig,
    pub regret: RegretConfig,
    pub switchregret: SwitchRegretConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::Regress,
            mode: ModeName::Static,
            q0: DEFAULT_Q0,
            drift: None,
            shutdown_threshold: DEFAULT_SHUTDOWN_THRESHOLD,
            n_rf: 50,
            t0: 100,
            seed: 0,
            standardize: true,
            dictionary: DictionaryConfig::default(),
            io: IoConfig::default(),
            reduce: ReduceConfig::default(),
            regret: RegretConfig::default(),
            switchregret: SwitchRegretConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable")
    }

    pub fn ensemble_mode(&self) -> Mode {
        match self.mode {
            ModeName::Static => Mode::Static,
            ModeName::Switching => Mode::Switching { q0: self.q0 },
            ModeName::Dynamic => Mode::Dynamic,
            ModeName::SwitchingDynamic => Mode::SwitchingDynamic { q0: self.q0 },
        }
    }

    /// Drift variance handed to the experts, present only in dynamic modes.
    pub fn expert_drift(&self) -> Option<f64> {
        self.ensemble_mode().is_dynamic().then_some(self.drift).flatten()
    }

    pub fn lvm_options(&self) -> LvmOptions {
        let r = &self.reduce;
        LvmOptions {
            prior_var: r.prior_var,
            fit_hyperparameters: self.dictionary.fit,
            init_rounds: r.init_rounds,
            init_inner_iter: r.init_inner_iter,
            embed_max_iter: r.embed_max_iter,
            embed_grad_tol: LvmOptions::default().embed_grad_tol,
            ann: AnnConfig {
                backend: r.ann,
                max_degree: r.max_degree,
                ef: r.ef,
                seed: self.seed,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.dictionary.is_empty() {
            return bad("dictionary must contain at least one kernel");
        }
        if self.n_rf == 0 {
            return bad("n_rf must be at least 1");
        }
        if !(self.q0 > 0.0 && self.q0 <= 1.0) {
            return bad("q0 must lie in (0, 1]");
        }
        if self.ensemble_mode().is_dynamic() {
            match self.drift {
                Some(q) if q > 0.0 && q.is_finite() => {}
                _ => return bad("dynamic modes need a positive drift variance"),
            }
        }
        if !(self.shutdown_threshold >= 0.0 && self.shutdown_threshold < 1.0) {
            return bad("shutdown_threshold must lie in [0, 1)");
        }
        match self.task {
            Task::Regress | Task::Classify | Task::Reduce => {
                if self.io.input.is_none() {
                    return bad("this task needs an input CSV");
                }
                if self.t0 < 2 {
                    return bad("t0 must be at least 2");
                }
                if self.task == Task::Reduce && self.reduce.latent_dim == 0 {
                    return bad("latent_dim must be at least 1");
                }
            }
            Task::Regret => {
                if self.regret.lengths.is_empty() || self.regret.runs == 0 {
                    return bad("regret sweep needs lengths and at least one run");
                }
            }
            Task::Switchregret => {
                if self.switchregret.lengths.is_empty() || self.switchregret.runs == 0 {
                    return bad("switching sweep needs lengths and at least one run");
                }
                if self.switchregret.lengths.iter().any(|&l| l < 2) {
                    return bad("switching sweep lengths must be at least 2");
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(cfg.dictionary.len(), 11);
    }

    #[test]
    fn sections_parse_and_validate() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            task = "regress"
            mode = "switching_dynamic"
            q0 = 0.95
            drift = 1e-4
            n_rf = 25
            [dictionary]
            exponents = [-1, 0, 1]
            [[dictionary.kernels]]
            family = "laplace"
            lengthscale = [1.0, 2.0]
            [io]
            input = "data.csv"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.ensemble_mode(), Mode::SwitchingDynamic { q0: 0.95 });
        assert_eq!(cfg.expert_drift(), Some(1e-4));
        let specs = cfg.dictionary.specs(2).unwrap();
        assert_eq!(specs.len(), 1);
        assert_eq!(specs[0].lengthscale(), &[1.0, 2.0]);
        cfg.validate().unwrap();
    }

    #[test]
    fn grid_uses_squared_lengthscales() {
        let d = DictionaryConfig {
            exponents: vec![2],
            ..DictionaryConfig::default()
        };
        assert_eq!(d.specs(1).unwrap()[0].lengthscale(), &[10.0]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        let mut cfg = ExperimentConfig {
            task: Task::Regret,
            ..ExperimentConfig::default()
        };
        cfg.validate().unwrap();
        cfg.mode = ModeName::Dynamic;
        assert!(cfg.validate().is_err());
        cfg.mode = ModeName::Static;
        cfg.dictionary.exponents.clear();
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig::default();
        assert!(cfg.validate().is_err(), "regression without input");
    }
}
