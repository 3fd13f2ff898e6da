//! Layers assembled from graph primitives.

use crate::error::{Error, Result};
use crate::graph::{Conv2dGeometry, Graph, Var};
use crate::params::{Builder, ParamId};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: b.xavier("weight", in_dim, out_dim)?,
            bias: b.zeros("bias", &[out_dim])?,
            in_dim,
            out_dim,
        })
    }

    /// Zero weight and bias; used for gated heads that must start silent.
    pub fn zeroed<T: Real>(b: &mut Builder<'_, T>, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: b.zeros("weight", &[in_dim, out_dim])?,
            bias: b.zeros("bias", &[out_dim])?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        if g.value(x).cols() != self.in_dim {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: g.shape(x).to_vec(),
                rhs: vec![self.in_dim, self.out_dim],
            });
        }
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let rows = g.value(x).rows();
        let x2 = if g.shape(x).len() == 2 { x } else { g.reshape(x, &[rows, self.in_dim])? };
        let y = g.matmul(x2, w)?;
        g.add_row(y, b)
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, dim: usize) -> Result<Self> {
        Ok(Self { gain: b.ones("gain", &[dim])?, bias: b.zeros("bias", &[dim])? })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul_row(n, gain)?;
        g.add_row(y, bias)
    }
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self { fc1: Linear::new(&mut b.sub("fc1"), dim, hidden)?, fc2: Linear::new(&mut b.sub("fc2"), hidden, dim)? })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Scaled dot-product attention with per-head projections.
///
/// Self-attention is the special case `queries == context`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, dim: usize, context_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument {
                op: "multi_head_attention",
                msg: format!("dim {dim} not divisible by {heads} heads"),
            });
        }
        Ok(Self {
            q: Linear::new(&mut b.sub("q"), dim, dim)?,
            k: Linear::new(&mut b.sub("k"), context_dim, dim)?,
            v: Linear::new(&mut b.sub("v"), context_dim, dim)?,
            out: Linear::new(&mut b.sub("out"), dim, dim)?,
            heads,
            dim,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, queries: Var, context: Var) -> Result<Var> {
        self.forward_batched(g, queries, context, 1)
    }

    /// Attention applied independently to `groups` row-stacked sequences:
    /// queries `[groups * lq, dim]`, context `[groups * lk, context_dim]`.
    pub fn forward_batched<T: Real>(&self, g: &mut Graph<'_, T>, queries: Var, context: Var, groups: usize) -> Result<Var> {
        let q = self.q.forward(g, queries)?;
        let k = self.k.forward(g, context)?;
        let v = self.v.forward(g, context)?;
        let a = g.attention(q, k, v, self.heads, groups)?;
        self.out.forward(g, a)
    }

    /// Attention output together with the softmax weights, head `h` in rows
    /// `h * n_queries ..` of a `[heads * n_queries, n_context]` tensor.
    pub fn forward_with_weights<T: Real>(&self, g: &mut Graph<'_, T>, queries: Var, context: Var) -> Result<(Var, Tensor<T>)> {
        let q = self.q.forward(g, queries)?;
        let k = self.k.forward(g, context)?;
        let v = self.v.forward(g, context)?;
        let a = g.attention(q, k, v, self.heads, 1)?;
        let w = g.attention_weights(a).expect("attention node");
        Ok((self.out.forward(g, a)?, w))
    }
}

/// Pre-norm transformer encoder layer: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&mut b.sub("norm1"), dim)?,
            attn: MultiHeadAttention::new(&mut b.sub("attn"), dim, dim, heads)?,
            norm2: LayerNorm::new(&mut b.sub("norm2"), dim)?,
            ffn: FeedForward::new(&mut b.sub("ffn"), dim, hidden)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let a = self.attn.forward(g, h, h)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        g.add(x, f)
    }
}

/// Learned lookup table `[rows, dim]`.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, rows: usize, dim: usize, std: f64) -> Result<Self> {
        Ok(Self { table: b.normal("table", &[rows, dim], std)?, rows, dim })
    }

    pub fn lookup<T: Real>(&self, g: &mut Graph<'_, T>, idx: &[usize]) -> Result<Var> {
        let t = g.param(self.table);
        g.gather_rows(t, idx)
    }

    pub fn all<T: Real>(&self, g: &mut Graph<'_, T>) -> Var {
        g.param(self.table)
    }
}

/// Convolution layer with `[out, in*k*k]` weights.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: Conv2dGeometry,
}

impl Conv2d {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, geom: Conv2dGeometry) -> Result<Self> {
        let fan_in = geom.in_channels * geom.kernel * geom.kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        Ok(Self {
            weight: b.normal("weight", &[geom.out_channels, fan_in], std)?,
            bias: b.zeros("bias", &[geom.out_channels])?,
            geom,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, b, self.geom)
    }
}

/// Per-feature shift, scale and gate predicted from a conditioning vector.
#[derive(Debug, Clone, Copy)]
pub struct Modulation {
    pub shift: Var,
    pub scale: Var,
    pub gate: Var,
}

/// Linear map from a conditioning embedding to `groups` modulation triples.
///
/// Zero-initialized, so at construction every gate is 0 and every scale and
/// shift is 0 (the effective multiplier `1 + scale` is 1).
#[derive(Debug, Clone)]
pub struct AdaLnModulation {
    pub proj: Linear,
    pub dim: usize,
    pub groups: usize,
}

impl AdaLnModulation {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cond_dim: usize, dim: usize, groups: usize) -> Result<Self> {
        Ok(Self { proj: Linear::zeroed(&mut b.sub("proj"), cond_dim, 3 * groups * dim)?, dim, groups })
    }

    /// `cond` is a `[1, cond_dim]` embedding (already activated).
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, cond: Var) -> Result<Vec<Modulation>> {
        let all = self.proj.forward(g, cond)?;
        let mut out = Vec::with_capacity(self.groups);
        for i in 0..self.groups {
            let base = 3 * i * self.dim;
            out.push(Modulation {
                shift: g.slice_cols(all, base, self.dim)?,
                scale: g.slice_cols(all, base + self.dim, self.dim)?,
                gate: g.slice_cols(all, base + 2 * self.dim, self.dim)?,
            });
        }
        Ok(out)
    }
}

/// `norm(x) * (1 + scale) + shift` with `norm` a plain layer normalization.
pub fn modulate<T: Real>(g: &mut Graph<'_, T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = g.layer_norm(x, LN_EPS);
    let s = g.add_const(scale, T::one());
    let y = g.mul_row(n, s)?;
    g.add_row(y, shift)
}

/// Adaptive layer norm as a standalone map:
/// `gate * (gamma * normalize(x) + beta)` with `gamma = 1 + scale`.
pub fn ada_layer_norm<T: Real>(g: &mut Graph<'_, T>, x: Var, m: Modulation) -> Result<Var> {
    let y = modulate(g, x, m.shift, m.scale)?;
    g.mul_row(y, m.gate)
}

/// `x + gate * branch`.
pub fn gated_residual<T: Real>(g: &mut Graph<'_, T>, x: Var, gate: Var, branch: Var) -> Result<Var> {
    let b = g.mul_row(branch, gate)?;
    g.add(x, b)
}

/// Sinusoidal features of a scalar time `t` (cos half, then sin half).
pub fn sinusoidal_features<T: Real>(t: f64, dim: usize, max_period: f64) -> Tensor<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
        let arg = t * freq;
        out[i] = T::lit(arg.cos());
        out[half + i] = T::lit(arg.sin());
    }
    Tensor::new(&[1, dim], out).expect("sized")
}

/// Sinusoidal features followed by a two-layer GELU MLP.
#[derive(Debug, Clone)]
pub struct TimestepEmbedding {
    pub fc1: Linear,
    pub fc2: Linear,
    pub freq_dim: usize,
}

impl TimestepEmbedding {
    /// Time is scaled by this factor before the sinusoidal features.
    pub const TIME_SCALE: f64 = 1000.0;

    pub fn new<T: Real>(b: &mut Builder<'_, T>, freq_dim: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut b.sub("fc1"), freq_dim, dim)?,
            fc2: Linear::new(&mut b.sub("fc2"), dim, dim)?,
            freq_dim,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, t: f64) -> Result<Var> {
        let feats = g.constant(sinusoidal_features(t * Self::TIME_SCALE, self.freq_dim, 10_000.0));
        let h = self.fc1.forward(g, feats)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup<T: Real>() -> (ParamStore<T>, ChaCha8Rng) {
        (ParamStore::new(), ChaCha8Rng::seed_from_u64(11))
    }

    #[test]
    fn single_context_token_gets_full_weight() {
        let (mut store, mut rng) = setup::<f64>();
        let mha = MultiHeadAttention::new(&mut Builder::new(&mut store, &mut rng).sub("mha"), 8, 8, 2).unwrap();
        let mut g = Graph::with_params(&store);
        let q1 = g.constant(Tensor::from_fn(&[3, 8], |i| (i as f64).sin()));
        let q2 = g.constant(Tensor::from_fn(&[3, 8], |i| (i as f64 * 7.0).cos() * 5.0));
        let kv = g.constant(Tensor::from_fn(&[1, 8], |i| i as f64 * 0.1));
        let (o1, w) = mha.forward_with_weights(&mut g, q1, kv).unwrap();
        let o2 = mha.forward(&mut g, q2, kv).unwrap();
        assert!(w.data().iter().all(|&p| p == 1.0));
        let (a, b) = (g.value(o1), g.value(o2));
        assert!(a.max_abs_diff(b) < 1e-12);
        // Every query row equals the projected value.
        for r in 1..3 {
            for c in 0..8 {
                assert!((a.row(r)[c] - a.row(0)[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let (mut store, mut rng) = setup::<f64>();
        let mha = MultiHeadAttention::new(&mut Builder::new(&mut store, &mut rng), 4, 4, 1).unwrap();
        let mut g = Graph::with_params(&store);
        let q = g.constant(Tensor::from_fn(&[2, 4], |i| i as f64));
        let kv = g.constant(Tensor::from_fn(&[5, 4], |i| (i % 4) as f64));
        let (_, w) = mha.forward_with_weights(&mut g, q, kv).unwrap();
        for &p in w.data() {
            assert!((p - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let (mut store, mut rng) = setup::<f32>();
        assert!(MultiHeadAttention::new(&mut Builder::new(&mut store, &mut rng), 6, 6, 4).is_err());
    }

    #[test]
    fn zero_gate_silences_ada_layer_norm() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[4, 6], |i| (i as f64 * 0.7).sin() * 3.0));
        let zeros = g.constant(Tensor::zeros(&[1, 6]));
        let y = ada_layer_norm(&mut g, x, Modulation { shift: zeros, scale: zeros, gate: zeros }).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_gate_is_plain_layer_norm() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[4, 16], |i| (i as f64 * 1.7).sin() * 3.0 + 2.0));
        let zeros = g.constant(Tensor::zeros(&[1, 16]));
        let ones = g.constant(Tensor::full(&[1, 16], 1.0));
        let y = ada_layer_norm(&mut g, x, Modulation { shift: zeros, scale: zeros, gate: ones }).unwrap();
        for r in 0..4 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn modulation_starts_at_zero() {
        let (mut store, mut rng) = setup::<f32>();
        let ada = AdaLnModulation::new(&mut Builder::new(&mut store, &mut rng), 8, 4, 3).unwrap();
        let mut g = Graph::with_params(&store);
        let c = g.constant(Tensor::full(&[1, 8], 1.0));
        for m in ada.forward(&mut g, c).unwrap() {
            for v in [m.shift, m.scale, m.gate] {
                assert!(g.value(v).data().iter().all(|&x| x == 0.0));
            }
        }
    }
}
