//! Guided Euler sampling from a trained checkpoint.

use autodiff::{Graph, ParamStore, Tensor};

use super::checkpoint::Checkpoint;
use super::codec::ChannelCodec;
use super::flow::{cfg_combine, euler};
use super::model::{FlowModel, ModalityMask};
use super::train::gaussian_noise;
use crate::error::{Error, Result};
use crate::perception::PerceptionInputs;
use crate::simulator::{ChannelTensor, PilotObservation};

/// One channel to estimate: its pilots, its scene condition and the seed
/// of its initial noise.
#[derive(Debug, Clone, Copy)]
pub struct SampleRequest<'a> {
    pub obs: &'a PilotObservation,
    pub env: &'a Tensor<f32>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Guidance {
    pub w: f64,
    pub steps: usize,
    pub mask: ModalityMask,
}

impl Guidance {
    pub fn new(w: f64, steps: usize) -> Self {
        Self { w, steps, mask: ModalityMask::NONE }
    }
}

pub struct FlowEstimator {
    pub model: FlowModel,
    pub params: ParamStore<f32>,
    pub codec: ChannelCodec,
    /// Requests evaluated per graph.
    pub chunk: usize,
}

impl FlowEstimator {
    pub fn new(ckpt: Checkpoint, delta_f: f64) -> Result<Self> {
        let model = ckpt.model()?;
        let c = &ckpt.meta.model;
        let codec = ChannelCodec::new(c.n_r, c.n_t, c.n_c, delta_f, c.dit.patch, ckpt.meta.norm)?;
        Ok(Self { model, params: ckpt.params, codec, chunk: 32 })
    }

    /// `C_env` values for one scene.
    pub fn environment(&self, inputs: &PerceptionInputs) -> Result<Tensor<f32>> {
        let mut g = Graph::with_params(&self.params);
        let v = self.model.environment(&mut g, inputs)?;
        Ok(g.value(v).clone())
    }

    /// Guided velocities for a batch of token states at time `t`.
    ///
    /// The conditional and unconditional branches share one batched forward
    /// pass. At `w = 1` (`w = 0`) the combination returns the conditional
    /// (unconditional) velocity bit for bit, so the unused branch is skipped.
    pub fn guided_velocity(&self, x: &[Vec<f64>], pilots: &[Vec<f64>], envs: &[&Tensor<f32>], t: f64, g_cfg: Guidance) -> Result<Vec<Vec<f64>>> {
        let b = x.len();
        if pilots.len() != b || envs.len() != b {
            return Err(Error::Shape(format!("{b} states, {} pilots, {} conditions", pilots.len(), envs.len())));
        }
        let need_env = g_cfg.w != 0.0;
        let need_null = g_cfg.w != 1.0;
        let branches = need_env as usize + need_null as usize;
        let (l, p) = (self.codec.spec.num_patches(), self.codec.spec.patch_size());
        let mut g = Graph::with_params(&self.params);
        let flat = |rows: &[Vec<f64>]| -> Vec<f32> { rows.iter().flat_map(|r| r.iter().map(|&v| v as f32)).collect() };
        let (mut xs, mut ps) = (flat(x), flat(pilots));
        if branches == 2 {
            xs.extend_from_within(..);
            ps.extend_from_within(..);
        }
        let ht = g.constant(Tensor::new(&[branches * b * l, p], xs)?);
        let pilot = g.constant(Tensor::new(&[branches * b * l, p], ps)?);
        let mut contexts = Vec::with_capacity(branches * b);
        if need_env {
            for env in envs {
                let e = g.constant((*env).clone());
                contexts.push(self.model.masked(&mut g, e, g_cfg.mask)?);
            }
        }
        if need_null {
            let null = self.model.null_environment(&mut g);
            contexts.extend(std::iter::repeat_n(null, b));
        }
        let v = self.model.velocity(&mut g, ht, pilot, &vec![t; branches * b], &contexts)?;
        let data = g.value(v).data();
        let n = l * p;
        let row = |i: usize| data[i * n..(i + 1) * n].iter().map(|&v| v as f64).collect::<Vec<f64>>();
        Ok((0..b)
            .map(|i| match (need_env, need_null) {
                (true, true) => cfg_combine(&row(b + i), &row(i), g_cfg.w),
                _ => row(i),
            })
            .collect())
    }

    /// Estimates in request order. Reproducible for fixed requests.
    pub fn estimate(&self, requests: &[SampleRequest<'_>], guidance: Guidance) -> Result<Vec<ChannelTensor>> {
        if guidance.steps == 0 {
            return Err(Error::Config("sampling needs at least one step".into()));
        }
        let n = self.codec.spec.numel();
        let mut out = Vec::with_capacity(requests.len());
        for chunk in requests.chunks(self.chunk.max(1)) {
            let pilots = chunk.iter().map(|r| self.codec.pilot_tokens(r.obs)).collect::<Result<Vec<_>>>()?;
            let envs: Vec<&Tensor<f32>> = chunk.iter().map(|r| r.env).collect();
            let h0: Vec<Vec<f64>> = chunk.iter().map(|r| gaussian_noise(r.seed, n)).collect();
            let h1 = euler(h0, guidance.steps, |x, t| self.guided_velocity(x, &pilots, &envs, t, guidance))?;
            for tokens in &h1 {
                out.push(self.codec.decode(tokens)?);
            }
        }
        Ok(out)
    }
}
