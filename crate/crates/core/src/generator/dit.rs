//! Diffusion transformer velocity network with pilot-token concatenation,
//! cross-attention to `C_env` and adaLN timestep modulation.

use autodiff::nn::{sinusoidal_features, AdaLnModulation, FeedForward, LayerNorm, Linear, MultiHeadAttention, TimestepEmbedding, LN_EPS};
use autodiff::{Builder, Graph, ParamId, Real, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::patch::PatchSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DitConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: [usize; 3],
    pub mlp_ratio: usize,
    pub freq_dim: usize,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl DitConfig {
    pub fn toy() -> Self {
        Self { dim: 64, depth: 3, heads: 4, patch: [2, 2, 8], mlp_ratio: 4, freq_dim: 64 }
    }

    pub fn paper_scale() -> Self {
        Self { dim: 384, depth: 6, heads: 6, patch: [2, 2, 8], mlp_ratio: 4, freq_dim: 256 }
    }
}

/// Self-attention, cross-attention and feed-forward, each behind its own
/// adaLN modulation and gated residual.
#[derive(Debug, Clone)]
pub struct DitBlock {
    pub modulation: AdaLnModulation,
    pub attn: MultiHeadAttention,
    pub cross: MultiHeadAttention,
    pub context_norm: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct Dit {
    pub cfg: DitConfig,
    pub spec: PatchSpec,
    pub env_len: usize,
    pub channel_embed: Linear,
    pub pilot_embed: Linear,
    /// Learnable `[2 L_patch, dim]` positions over the concatenated sequence.
    pub pos: ParamId,
    pub time: TimestepEmbedding,
    pub blocks: Vec<DitBlock>,
    pub final_modulation: AdaLnModulation,
    pub head: Linear,
}

/// Initial positions: one Gaussian code per patch index, identical for
/// channel patch `i` and pilot patch `i`.
fn shared_position_init<T: Real>(rng: &mut impl Rng, l: usize, d: usize) -> Tensor<T> {
    let dist = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).expect("valid std");
    let codes: Vec<T> = (0..l * d).map(|_| T::lit(dist.sample(rng))).collect();
    let data = codes.iter().chain(&codes).copied().collect();
    Tensor::new(&[2 * l, d], data).expect("sized")
}

/// `LN(x) * (1 + scale) + shift` with one `[batch, dim]` modulation row per
/// sample block of `x`.
fn modulate_rows<T: Real>(g: &mut Graph<'_, T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = g.layer_norm(x, LN_EPS);
    let s = g.add_const(scale, T::one());
    let y = g.mul_row(n, s)?;
    Ok(g.add_row(y, shift)?)
}

impl Dit {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &DitConfig, dims: [usize; 3], env_len: usize) -> Result<Self> {
        let spec = PatchSpec::new(dims, cfg.patch)?;
        let (d, p) = (cfg.dim, spec.patch_size());
        if cfg.freq_dim % 2 != 0 || cfg.freq_dim == 0 {
            return Err(Error::Config("freq_dim must be a positive even number".into()));
        }
        let blocks = (0..cfg.depth)
            .map(|i| {
                let mut b = b.sub(&format!("block{i}"));
                Ok(DitBlock {
                    modulation: AdaLnModulation::new(&mut b.sub("modulation"), d, d, 3)?,
                    attn: MultiHeadAttention::new(&mut b.sub("attn"), d, d, cfg.heads)?,
                    cross: MultiHeadAttention::new(&mut b.sub("cross"), d, d, cfg.heads)?,
                    context_norm: LayerNorm::new(&mut b.sub("context_norm"), d)?,
                    ffn: FeedForward::new(&mut b.sub("ffn"), d, cfg.mlp_ratio * d)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            spec,
            env_len,
            channel_embed: Linear::new(&mut b.sub("channel_embed"), p, d)?,
            pilot_embed: Linear::new(&mut b.sub("pilot_embed"), p, d)?,
            pos: {
                let init = shared_position_init(b.rng(), spec.num_patches(), d);
                b.tensor("pos", init)?
            },
            time: TimestepEmbedding::new(&mut b.sub("time"), cfg.freq_dim, d)?,
            blocks,
            final_modulation: AdaLnModulation::new(&mut b.sub("final_modulation"), d, d, 1)?,
            head: Linear::zeroed(&mut b.sub("head"), d, p)?,
        })
    }

    /// `[batch, dim]` timestep embedding.
    fn time_embedding<T: Real>(&self, g: &mut Graph<'_, T>, ts: &[f64]) -> Result<Var> {
        let f = self.cfg.freq_dim;
        let mut feats = Vec::with_capacity(ts.len() * f);
        for &t in ts {
            feats.extend_from_slice(sinusoidal_features::<T>(t * TimestepEmbedding::TIME_SCALE, f, 10_000.0).data());
        }
        let x = g.constant(Tensor::new(&[ts.len(), f], feats)?);
        let h = self.time.fc1.forward(g, x)?;
        let h = g.gelu(h);
        Ok(self.time.fc2.forward(g, h)?)
    }

    /// Velocity in patch-token layout, `[batch * L_patch, patch_size]`.
    ///
    /// `ht` and `pilot` are row-stacked patch tokens for the whole batch;
    /// `contexts` holds one `[env_len, dim]` condition per sample.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, ht: Var, pilot: Var, ts: &[f64], contexts: &[Var]) -> Result<Var> {
        let batch = ts.len();
        let l = self.spec.num_patches();
        let p = self.spec.patch_size();
        let d = self.cfg.dim;
        if batch == 0 || contexts.len() != batch {
            return Err(Error::Shape(format!("{} timesteps for {} contexts", batch, contexts.len())));
        }
        for v in [ht, pilot] {
            if g.shape(v) != [batch * l, p] {
                return Err(Error::Shape(format!("patch tokens {:?}, expected [{}, {p}]", g.shape(v), batch * l)));
            }
        }
        for &c in contexts {
            if g.shape(c) != [self.env_len, d] {
                return Err(Error::Shape(format!("context {:?}, expected [{}, {d}]", g.shape(c), self.env_len)));
            }
        }
        let seq = 2 * l;
        let e_ch = self.channel_embed.forward(g, ht)?;
        let e_pilot = self.pilot_embed.forward(g, pilot)?;
        let mut parts = Vec::with_capacity(2 * batch);
        for b in 0..batch {
            if batch == 1 {
                parts.extend([e_ch, e_pilot]);
            } else {
                parts.push(g.slice_rows(e_ch, b * l, l)?);
                parts.push(g.slice_rows(e_pilot, b * l, l)?);
            }
        }
        let x = g.concat_rows(&parts)?;
        let pos_table = g.param(self.pos);
        let pos_idx: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let pos = g.gather_rows(pos_table, &pos_idx)?;
        let mut x = g.add(x, pos)?;

        let temb = self.time_embedding(g, ts)?;
        let cond = g.gelu(temb);
        let ctx = if batch == 1 { contexts[0] } else { g.concat_rows(contexts)? };

        for blk in &self.blocks {
            let mods = blk.modulation.forward(g, cond)?;
            let m = &mods[0];
            let h = modulate_rows(g, x, m.shift, m.scale)?;
            let a = blk.attn.forward_batched(g, h, h, batch)?;
            let a = g.mul_row(a, m.gate)?;
            x = g.add(x, a)?;

            let m = &mods[1];
            let h = modulate_rows(g, x, m.shift, m.scale)?;
            let c = blk.context_norm.forward(g, ctx)?;
            let a = blk.cross.forward_batched(g, h, c, batch)?;
            let a = g.mul_row(a, m.gate)?;
            x = g.add(x, a)?;

            let m = &mods[2];
            let h = modulate_rows(g, x, m.shift, m.scale)?;
            let f = blk.ffn.forward(g, h)?;
            let f = g.mul_row(f, m.gate)?;
            x = g.add(x, f)?;
        }

        let ch_idx: Vec<usize> = (0..batch).flat_map(|b| (0..l).map(move |i| b * seq + i)).collect();
        let x_ch = g.gather_rows(x, &ch_idx)?;
        let fm = self.final_modulation.forward(g, cond)?[0];
        let y = modulate_rows(g, x_ch, fm.shift, fm.scale)?;
        Ok(self.head.forward(g, y)?)
    }
}
