//! Evaluation grids over SNR, pilot spacing, methods, sampling steps and
//! modality masks, persisted as CSV records.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use autodiff::Tensor;
use serde::{Deserialize, Serialize};

use super::metrics::{CosineAccumulator, NmseAccumulator};
use crate::error::{Error, Result};
use crate::estimators::{empirical_covariance, ls_interpolated, ChannelCovariance, LmmseFilter};
use crate::generator::{FlowEstimator, Guidance, ModalityMask, SampleRequest};
use crate::perception::PerceptionInputs;
use crate::rng;
use crate::simulator::{to_cav_frame, transmit, ChannelTensor, Dataset, Noise, PilotObservation, PilotPattern};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Ls,
    Lmmse,
    Flow { w: f64 },
}

impl Method {
    /// `ls`, `lmmse` or `flow:<w>`.
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "ls" => Ok(Self::Ls),
            "lmmse" => Ok(Self::Lmmse),
            other => {
                let w = other
                    .strip_prefix("flow:")
                    .and_then(|w| w.parse::<f64>().ok())
                    .filter(|w| w.is_finite())
                    .ok_or_else(|| Error::Config(format!("unknown method '{other}'")))?;
                Ok(Self::Flow { w })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub seed: u64,
    pub scenarios: Vec<String>,
    pub snrs: Vec<f64>,
    pub spacings: Vec<usize>,
    pub methods: Vec<String>,
    /// Euler step counts applied to every flow method.
    pub steps: Vec<usize>,
    /// Comma-separated dropped modalities per entry, e.g. `"camera,lidar"`.
    pub masks: Vec<String>,
    /// Cap on evaluated samples per set; 0 uses all.
    pub max_samples: usize,
    pub flat_cosine: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 11,
            scenarios: vec!["urban".into()],
            snrs: vec![-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            spacings: vec![2, 4, 8],
            methods: vec!["ls".into(), "lmmse".into(), "flow:0".into(), "flow:1".into()],
            steps: vec![1],
            masks: vec!["none".into()],
            max_samples: 0,
            flat_cosine: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for m in &self.methods {
            Method::parse(m)?;
        }
        for m in &self.masks {
            ModalityMask::parse(m)?;
        }
        if self.steps.contains(&0) {
            return Err(Error::Config("step counts must be positive".into()));
        }
        if self.spacings.contains(&0) {
            return Err(Error::Config("pilot spacings must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub scenario: String,
    /// `ls`, `lmmse`, `flow`, or `flow/<label>` under a modality mask.
    pub method: String,
    pub w: Option<f64>,
    pub steps: Option<usize>,
    pub snr_db: f64,
    pub spacing: usize,
    pub nmse_db: f64,
    pub cosine: f64,
    pub n_samples: usize,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "scenario,method,w,steps,snr_db,spacing,nmse_db,cosine,n_samples,seed";

impl fmt::Display for EvalRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |x: Option<String>| x.unwrap_or_default();
        write!(
            f,
            "{},{},{},{},{},{},{},{},{},{}",
            self.scenario,
            self.method,
            opt(self.w.map(|w| w.to_string())),
            opt(self.steps.map(|s| s.to_string())),
            self.snr_db,
            self.spacing,
            self.nmse_db,
            self.cosine,
            self.n_samples,
            self.seed
        )
    }
}

impl EvalRecord {
    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 10 {
            return Err(Error::Format(format!("expected 10 CSV fields, got {}: '{line}'", f.len())));
        }
        let bad = |what: &str| Error::Format(format!("bad {what} in '{line}'"));
        let opt_f = |s: &str| if s.is_empty() { Ok(None) } else { s.parse().map(Some).map_err(|_| bad("w")) };
        let opt_u = |s: &str| if s.is_empty() { Ok(None) } else { s.parse().map(Some).map_err(|_| bad("steps")) };
        Ok(Self {
            scenario: f[0].into(),
            method: f[1].into(),
            w: opt_f(f[2])?,
            steps: opt_u(f[3])?,
            snr_db: f[4].parse().map_err(|_| bad("snr_db"))?,
            spacing: f[5].parse().map_err(|_| bad("spacing"))?,
            nmse_db: f[6].parse().map_err(|_| bad("nmse_db"))?,
            cosine: f[7].parse().map_err(|_| bad("cosine"))?,
            n_samples: f[8].parse().map_err(|_| bad("n_samples"))?,
            seed: f[9].parse().map_err(|_| bad("seed"))?,
        })
    }

    /// Series name used in reports, e.g. `flow(w=0.5,steps=1)`.
    pub fn series(&self) -> String {
        match (self.w, self.steps) {
            (Some(w), Some(s)) => format!("{}(w={w},steps={s})", self.method),
            _ => self.method.clone(),
        }
    }
}

pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(w, "{r}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim_end() != CSV_HEADER {
        return Err(Error::Format(format!("{} lacks the results header", path.display())));
    }
    lines.filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty())).map(|l| EvalRecord::parse(&l?)).collect()
}

/// A held-out dataset under its scenario name.
pub struct EvalSet<'a> {
    pub scenario: String,
    pub data: &'a Dataset,
}

/// Same noise realization per sample across cells, so SNR only rescales it.
fn noise_seed(seed: u64, sample: usize) -> u64 {
    rng::stream_seed(seed, sample as u64, "eval-noise")
}

fn h0_seed(seed: u64, sample: usize) -> u64 {
    rng::stream_seed(seed, sample as u64, "eval-h0")
}

struct Scored {
    nmse_db: f64,
    cosine: f64,
}

fn score(truth: &[&ChannelTensor], est: &[ChannelTensor], flat: bool) -> Result<Scored> {
    let mut n = NmseAccumulator::default();
    let mut c = CosineAccumulator::new(flat);
    for (h, e) in truth.iter().zip(est) {
        n.add(h, e)?;
        c.add(h, e)?;
    }
    Ok(Scored { nmse_db: n.db()?, cosine: c.mean()? })
}

/// Scene conditions, computed once per scene and shared by its frames.
pub fn scene_environments(flow: &FlowEstimator, data: &Dataset, n_scenes: usize) -> Result<Vec<Tensor<f32>>> {
    data.scenes[..n_scenes]
        .iter()
        .map(|s| flow.environment(&PerceptionInputs::from_scene(&to_cav_frame(s), &flow.model.cfg.perception)?))
        .collect()
}

pub fn flow_estimates(
    flow: &FlowEstimator,
    data: &Dataset,
    envs: &[Tensor<f32>],
    obs: &[PilotObservation],
    seed: u64,
    guidance: Guidance,
) -> Result<Vec<ChannelTensor>> {
    let requests: Vec<SampleRequest<'_>> = obs
        .iter()
        .enumerate()
        .map(|(i, o)| SampleRequest { obs: o, env: &envs[data.scene_of(i)], seed: h0_seed(seed, i) })
        .collect();
    flow.estimate(&requests, guidance)
}

/// Observations of the first `n` samples at one grid cell.
pub fn observations(data: &Dataset, n: usize, spacing: usize, snr_db: f64, seed: u64) -> Result<Vec<PilotObservation>> {
    let pattern = PilotPattern::interleaved(spacing, data.n_c, data.n_t)?;
    let noise = Noise::Snr { snr_db, signal_power: data.signal_power() };
    data.channels[..n].iter().enumerate().map(|(i, h)| transmit(h, &pattern, noise, noise_seed(seed, i))).collect()
}

/// Evaluate the configured grid. Records are ordered scenario, spacing,
/// SNR, method, steps, mask. The LMMSE covariance is the empirical
/// covariance of each evaluation set.
pub fn sweep(cfg: &EvalConfig, sets: &[EvalSet<'_>], flow: Option<&FlowEstimator>) -> Result<Vec<EvalRecord>> {
    cfg.validate()?;
    let methods = cfg.methods.iter().map(|m| Method::parse(m)).collect::<Result<Vec<_>>>()?;
    let masks = cfg.masks.iter().map(|m| ModalityMask::parse(m)).collect::<Result<Vec<_>>>()?;
    let uses_flow = methods.iter().any(|m| matches!(m, Method::Flow { .. }));
    if uses_flow && flow.is_none() {
        return Err(Error::Config("flow methods need a checkpoint".into()));
    }
    let mut records = Vec::new();
    for set in sets {
        let data = set.data;
        let n = if cfg.max_samples == 0 { data.len() } else { cfg.max_samples.min(data.len()) };
        if n == 0 {
            return Err(Error::TooFewSamples { needed: 1, got: 0 });
        }
        let truth: Vec<&ChannelTensor> = data.channels[..n].iter().collect();
        let cov: Option<ChannelCovariance> =
            if methods.contains(&Method::Lmmse) { Some(empirical_covariance(&data.channels.iter().collect::<Vec<_>>())?) } else { None };
        let envs = match flow {
            Some(f) if uses_flow => scene_environments(f, data, data.scene_of(n - 1) + 1)?,
            _ => Vec::new(),
        };
        for &spacing in &cfg.spacings {
            for &snr in &cfg.snrs {
                let obs = observations(data, n, spacing, snr, cfg.seed)?;
                let mut base = EvalRecord {
                    scenario: set.scenario.clone(),
                    method: String::new(),
                    w: None,
                    steps: None,
                    snr_db: snr,
                    spacing,
                    nmse_db: 0.0,
                    cosine: 0.0,
                    n_samples: n,
                    seed: cfg.seed,
                };
                for &m in &methods {
                    match m {
                        Method::Ls => {
                            let est = obs.iter().map(|o| ls_interpolated(o, data.delta_f)).collect::<Result<Vec<_>>>()?;
                            let s = score(&truth, &est, cfg.flat_cosine)?;
                            records.push(EvalRecord { method: "ls".into(), nmse_db: s.nmse_db, cosine: s.cosine, ..base.clone() });
                        }
                        Method::Lmmse => {
                            let filter = LmmseFilter::new(cov.as_ref().expect("covariance computed"), &obs[0].pattern, obs[0].noise_variance)?;
                            let est = obs.iter().map(|o| filter.estimate(o, data.delta_f)).collect::<Result<Vec<_>>>()?;
                            let s = score(&truth, &est, cfg.flat_cosine)?;
                            records.push(EvalRecord { method: "lmmse".into(), nmse_db: s.nmse_db, cosine: s.cosine, ..base.clone() });
                        }
                        Method::Flow { w } => {
                            let f = flow.expect("checked above");
                            for &steps in &cfg.steps {
                                for &mask in &masks {
                                    let est = flow_estimates(f, data, &envs, &obs, cfg.seed, Guidance { w, steps, mask })?;
                                    let s = score(&truth, &est, cfg.flat_cosine)?;
                                    base.method = if mask == ModalityMask::NONE { "flow".into() } else { format!("flow/{}", mask.label()) };
                                    records.push(EvalRecord { w: Some(w), steps: Some(steps), nmse_db: s.nmse_db, cosine: s.cosine, ..base.clone() });
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(records)
}

/// Flow records with each mask substituted, grouped by label.
pub fn modality_ablation(
    flow: &FlowEstimator,
    set: &EvalSet<'_>,
    masks: &[ModalityMask],
    snr_db: f64,
    spacing: usize,
    w: f64,
    seed: u64,
    max_samples: usize,
) -> Result<BTreeMap<String, EvalRecord>> {
    let cfg = EvalConfig {
        seed,
        scenarios: vec![set.scenario.clone()],
        snrs: vec![snr_db],
        spacings: vec![spacing],
        methods: vec![format!("flow:{w}")],
        steps: vec![1],
        masks: masks.iter().map(mask_spec).collect(),
        max_samples,
        flat_cosine: false,
    };
    let records = sweep(&cfg, std::slice::from_ref(set), Some(flow))?;
    Ok(masks.iter().zip(records).map(|(m, r)| (m.label(), r)).collect())
}

fn mask_spec(m: &ModalityMask) -> String {
    let mut parts = Vec::new();
    if m.lidar {
        parts.push("lidar");
    }
    if m.camera {
        parts.push("camera");
    }
    if m.position {
        parts.push("position");
    }
    if parts.is_empty() {
        "none".into()
    } else {
        parts.join(",")
    }
}
