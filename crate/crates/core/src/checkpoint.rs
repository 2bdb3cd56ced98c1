//! Versioned binary checkpoints of a streaming run.
//!
//! Layout: the 8-byte magic `IEGPCKPT`, a little-endian `u32` format version,
//! a model tag, the model payload, then driver state (rows consumed, frozen
//! standardization, accumulated per-step series). Every float is stored as
//! its raw bits, so a save/load round trip is bitwise exact. Feature maps are
//! stored verbatim rather than regenerated.

use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::ann::{AnnBackend, AnnConfig, AnnIndex};
use crate::ensemble::{EnsembleState, Mode};
use crate::error::{Error, Result};
use crate::expert::{ExpertState, Likelihood};
use crate::kernels::{FeatureMap, KernelFamily, KernelSpec, Lengthscale};
use crate::lvm::{LvmExpertState, LvmModel, LvmOptions};

pub const MAGIC: &[u8; 8] = b"IEGPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub enum ModelState {
    Ensemble(EnsembleState),
    Lvm(LvmModel),
}

impl ModelState {
    pub fn dictionary_size(&self) -> usize {
        match self {
            ModelState::Ensemble(e) => e.len(),
            ModelState::Lvm(m) => m.experts().len(),
        }
    }
}

/// Input standardization frozen after the initialization window.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    /// Column means and standard deviations of `rows`; zero deviations map to 1.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Init("cannot standardize an empty window".into()))?;
        let d = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in scale.iter_mut().zip(r).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let scale = scale.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Ok(Standardization { mean, scale })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelState,
    /// Data rows (after the header) already consumed from the input.
    pub rows_consumed: u64,
    pub standardization: Option<Standardization>,
    /// Named per-step series accumulated by the driver.
    pub series: Vec<(String, Vec<f64>)>,
}

struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        for x in v {
            self.f64(*x);
        }
    }
    fn bool(&mut self, v: bool) {
        self.u8(u8::from(v));
    }
    fn opt_f64(&mut self, v: Option<f64>) {
        self.bool(v.is_some());
        self.f64(v.unwrap_or(0.0));
    }
    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn matrix(&mut self, m: &DMatrix<f64>) {
        self.usize(m.nrows());
        self.usize(m.ncols());
        for v in m.iter() {
            self.f64(*v);
        }
    }
    fn spec(&mut self, s: &KernelSpec) {
        self.u8(s.family.tag());
        self.usize(s.input_dim);
        for l in s.lengthscale() {
            self.f64(*l);
        }
        self.f64(s.magnitude);
        self.f64(s.noise);
    }
    fn map(&mut self, m: &FeatureMap) {
        m.write_block(&mut self.0).expect("writing to memory cannot fail");
    }
}

struct Dec<'a> {
    buf: &'a [u8],
}

const MAX_LEN: usize = 1 << 32;

impl Dec<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(Error::Checkpoint("file is truncated".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()? as usize;
        if v > MAX_LEN {
            return Err(Error::Checkpoint(format!("implausible length {v}")));
        }
        Ok(v)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Checkpoint(format!("bad boolean byte {b}"))),
        }
    }
    fn opt_f64(&mut self) -> Result<Option<f64>> {
        let some = self.bool()?;
        let v = self.f64()?;
        Ok(some.then_some(v))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8 string".into()))
    }
    fn matrix(&mut self) -> Result<DMatrix<f64>> {
        let (r, c) = (self.usize()?, self.usize()?);
        if r.saturating_mul(c) > MAX_LEN {
            return Err(Error::Checkpoint(format!("implausible matrix shape {r}x{c}")));
        }
        let data = (0..r * c).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_vec(r, c, data))
    }
    fn spec(&mut self) -> Result<KernelSpec> {
        let tag = self.u8()?;
        let family = KernelFamily::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown kernel tag {tag}")))?;
        let d = self.usize()?;
        let ls = (0..d).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        let magnitude = self.f64()?;
        let noise = self.f64()?;
        KernelSpec::new(family, Lengthscale::PerDim(ls), magnitude, noise, d)
    }
    fn map(&mut self) -> Result<FeatureMap> {
        let mut cursor = self.buf;
        let map = FeatureMap::read_block(&mut cursor)?;
        self.buf = cursor;
        Ok(map)
    }
}

fn mode_tag(mode: Mode) -> (u8, f64) {
    match mode {
        Mode::Static => (0, 0.0),
        Mode::Switching { q0 } => (1, q0),
        Mode::Dynamic => (2, 0.0),
        Mode::SwitchingDynamic { q0 } => (3, q0),
    }
}

fn mode_from_tag(tag: u8, q0: f64) -> Result<Mode> {
    Ok(match tag {
        0 => Mode::Static,
        1 => Mode::Switching { q0 },
        2 => Mode::Dynamic,
        3 => Mode::SwitchingDynamic { q0 },
        _ => return Err(Error::Checkpoint(format!("unknown mode tag {tag}"))),
    })
}

fn encode_ensemble(e: &mut Enc, ens: &EnsembleState) {
    let (tag, q0) = mode_tag(ens.mode);
    e.u8(tag);
    e.f64(q0);
    e.f64(ens.shutdown_threshold);
    e.u64(ens.steps);
    e.f64(ens.cum_ensemble_loss);
    e.bool(ens.staged.is_some());
    e.f64s(ens.staged.as_deref().unwrap_or(&[]));
    e.usize(ens.experts.len());
    for (m, x) in ens.experts.iter().enumerate() {
        e.u8(match x.likelihood() {
            Likelihood::Gaussian => 0,
            Likelihood::Logistic => 1,
        });
        e.spec(x.spec());
        e.map(x.map());
        e.opt_f64(x.drift());
        e.f64s(x.mean().as_slice());
        e.matrix(x.cov());
        e.f64(ens.log_weights[m]);
        e.bool(ens.active[m]);
        e.f64(ens.cum_expert_loss[m]);
        e.u64(ens.correct_calls[m]);
    }
}

fn decode_ensemble(d: &mut Dec) -> Result<EnsembleState> {
    let tag = d.u8()?;
    let q0 = d.f64()?;
    let mode = mode_from_tag(tag, q0)?;
    let shutdown_threshold = d.f64()?;
    let steps = d.u64()?;
    let cum_ensemble_loss = d.f64()?;
    let has_staged = d.bool()?;
    let staged_values = d.f64s()?;
    let m = d.usize()?;
    let mut experts = Vec::with_capacity(m);
    let (mut log_weights, mut active, mut cum_expert_loss, mut correct_calls) = (vec![], vec![], vec![], vec![]);
    for _ in 0..m {
        let likelihood = match d.u8()? {
            0 => Likelihood::Gaussian,
            1 => Likelihood::Logistic,
            b => return Err(Error::Checkpoint(format!("unknown likelihood tag {b}"))),
        };
        let spec = Arc::new(d.spec()?);
        let map = Arc::new(d.map()?);
        let drift = d.opt_f64()?;
        let mean = DVector::from_vec(d.f64s()?);
        let cov = d.matrix()?;
        let mut x = ExpertState::from_moments(spec, map, likelihood, mean, cov)
            .map_err(|e| Error::Checkpoint(format!("inconsistent expert: {e}")))?;
        if let Some(q) = drift {
            x = x.with_drift(q)?;
        }
        experts.push(x);
        log_weights.push(d.f64()?);
        active.push(d.bool()?);
        cum_expert_loss.push(d.f64()?);
        correct_calls.push(d.u64()?);
    }
    let mut ens = EnsembleState::new(experts, mode).map_err(|e| Error::Checkpoint(e.to_string()))?;
    ens.shutdown_threshold = shutdown_threshold;
    ens.steps = steps;
    ens.cum_ensemble_loss = cum_ensemble_loss;
    ens.staged = has_staged.then_some(staged_values);
    ens.log_weights = log_weights;
    ens.active = active;
    ens.cum_expert_loss = cum_expert_loss;
    ens.correct_calls = correct_calls;
    Ok(ens)
}

fn encode_ann_config(e: &mut Enc, c: &AnnConfig) {
    e.u8(match c.backend {
        AnnBackend::Hnsw => 0,
        AnnBackend::BruteForce => 1,
    });
    e.usize(c.max_degree);
    e.usize(c.ef);
    e.u64(c.seed);
}

fn decode_ann_config(d: &mut Dec) -> Result<AnnConfig> {
    let backend = match d.u8()? {
        0 => AnnBackend::Hnsw,
        1 => AnnBackend::BruteForce,
        b => return Err(Error::Checkpoint(format!("unknown index backend {b}"))),
    };
    Ok(AnnConfig {
        backend,
        max_degree: d.usize()?,
        ef: d.usize()?,
        seed: d.u64()?,
    })
}

fn encode_lvm(e: &mut Enc, model: &LvmModel) {
    let o = &model.options;
    e.f64(o.prior_var);
    e.bool(o.fit_hyperparameters);
    e.usize(o.init_rounds);
    e.usize(o.init_inner_iter);
    e.usize(o.embed_max_iter);
    e.f64(o.embed_grad_tol);
    encode_ann_config(e, &o.ann);
    e.f64s(model.center.as_slice());
    e.f64s(&model.log_weights);
    e.usize(model.selected.len());
    for x in &model.selected {
        e.f64s(x.as_slice());
    }
    e.usize(model.experts.len());
    for x in &model.experts {
        e.spec(&x.spec);
        e.map(&x.map);
        e.matrix(&x.r);
        e.matrix(&x.b);
        e.f64(x.prior_var);
        e.f64(x.init_objective);
        e.usize(x.embeddings.len());
        for v in &x.embeddings {
            e.f64s(v.as_slice());
        }
    }
    // The index is rebuilt by replaying insertions, which reproduces its graph exactly.
    e.usize(model.ann.dim());
    e.usize(model.ann.len());
    for p in model.ann.points() {
        e.f64s(p);
    }
}

fn decode_lvm(d: &mut Dec) -> Result<LvmModel> {
    let options = LvmOptions {
        prior_var: d.f64()?,
        fit_hyperparameters: d.bool()?,
        init_rounds: d.usize()?,
        init_inner_iter: d.usize()?,
        embed_max_iter: d.usize()?,
        embed_grad_tol: d.f64()?,
        ann: decode_ann_config(d)?,
    };
    let center = DVector::from_vec(d.f64s()?);
    let log_weights = d.f64s()?;
    let n_sel = d.usize()?;
    let selected = (0..n_sel).map(|_| d.f64s().map(DVector::from_vec)).collect::<Result<Vec<_>>>()?;
    let m = d.usize()?;
    let mut experts = Vec::with_capacity(m);
    for _ in 0..m {
        let spec = d.spec()?;
        let map = Arc::new(d.map()?);
        let r = d.matrix()?;
        let b = d.matrix()?;
        let prior_var = d.f64()?;
        let init_objective = d.f64()?;
        let n = d.usize()?;
        let embeddings = (0..n).map(|_| d.f64s().map(DVector::from_vec)).collect::<Result<Vec<_>>>()?;
        let p = map.feature_dim();
        if r.shape() != (p, p) || b.nrows() != p || b.ncols() != center.len() {
            return Err(Error::Checkpoint("latent expert statistics have inconsistent shapes".into()));
        }
        experts.push(LvmExpertState {
            r,
            b,
            map,
            spec,
            embeddings,
            prior_var,
            init_objective,
        });
    }
    if log_weights.len() != m || m == 0 {
        return Err(Error::Checkpoint("weight count does not match expert count".into()));
    }
    let dim = d.usize()?;
    let mut ann = AnnIndex::new(dim, options.ann)?;
    let n_pts = d.usize()?;
    for _ in 0..n_pts {
        ann.insert(&d.f64s()?)?;
    }
    Ok(LvmModel {
        experts,
        log_weights,
        ann,
        center,
        selected,
        options,
    })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Enc(Vec::new());
        e.0.extend_from_slice(MAGIC);
        e.0.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        match &self.model {
            ModelState::Ensemble(ens) => {
                e.u8(0);
                encode_ensemble(&mut e, ens);
            }
            ModelState::Lvm(m) => {
                e.u8(1);
                encode_lvm(&mut e, m);
            }
        }
        e.u64(self.rows_consumed);
        e.bool(self.standardization.is_some());
        if let Some(s) = &self.standardization {
            e.f64s(&s.mean);
            e.f64s(&s.scale);
        }
        e.usize(self.series.len());
        for (name, values) in &self.series {
            e.str(name);
            e.f64s(values);
        }
        e.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let mut d = Dec { buf: &bytes[12..] };
        let model = match d.u8()? {
            0 => ModelState::Ensemble(decode_ensemble(&mut d)?),
            1 => ModelState::Lvm(decode_lvm(&mut d)?),
            t => return Err(Error::Checkpoint(format!("unknown model tag {t}"))),
        };
        let rows_consumed = d.u64()?;
        let standardization = if d.bool()? {
            Some(Standardization {
                mean: d.f64s()?,
                scale: d.f64s()?,
            })
        } else {
            None
        };
        let n = d.usize()?;
        let series = (0..n).map(|_| Ok((d.str()?, d.f64s()?))).collect::<Result<Vec<_>>>()?;
        if !d.buf.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after payload", d.buf.len())));
        }
        Ok(Checkpoint {
            model,
            rows_consumed,
            standardization,
            series,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and refuses a checkpoint whose dictionary size differs from `expected`.
    pub fn load_for_dictionary(path: &Path, expected: usize) -> Result<Self> {
        let ck = Self::load(path)?;
        let got = ck.model.dictionary_size();
        if got != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {got} experts but the configured dictionary has {expected}"
            )));
        }
        Ok(ck)
    }
}
