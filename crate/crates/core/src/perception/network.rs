//! Modality branches and the fusion encoder producing `C_env`.

use autodiff::nn::{Conv2d, EncoderLayer, Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use autodiff::{Builder, Conv2dGeometry, Graph, ParamId, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::sensors::{rasterize_bev, render_views, SensorConfig};
use crate::error::{Error, Result};
use crate::simulator::{AlignedScene, Point3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptionConfig {
    pub sensors: SensorConfig,
    /// BEV cells per side of one patch token.
    pub bev_patch: usize,
    pub n_lidar: usize,
    pub n_cam: usize,
    pub n_phy: usize,
    pub resampler_depth: usize,
    pub fusion_depth: usize,
    /// Tokens emitted per camera view before resampling.
    pub tokens_per_view: usize,
    pub conv_channels: [usize; 3],
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            sensors: SensorConfig::default(),
            bev_patch: 4,
            n_lidar: 8,
            n_cam: 8,
            n_phy: 2,
            resampler_depth: 1,
            fusion_depth: 2,
            tokens_per_view: 2,
            conv_channels: [8, 16, 32],
        }
    }
}

impl PerceptionConfig {
    pub fn env_len(&self) -> usize {
        self.n_lidar + self.n_cam + self.n_phy
    }

    /// Row ranges of the lidar, camera and position tokens in `C_env`.
    pub fn modality_ranges(&self) -> [std::ops::Range<usize>; 3] {
        let a = self.n_lidar;
        let b = a + self.n_cam;
        [0..a, a..b, b..b + self.n_phy]
    }

    fn bev_grid(&self) -> usize {
        self.sensors.bev_cells / self.bev_patch
    }

    fn bev_token_dim(&self) -> usize {
        self.bev_patch * self.bev_patch * 2 + 2
    }

    fn conv_geometry(&self) -> [Conv2dGeometry; 3] {
        let c = self.conv_channels;
        let g = |i, o| Conv2dGeometry { in_channels: i, out_channels: o, kernel: 3, stride: 2, padding: 1 };
        [g(1, c[0]), g(c[0], c[1]), g(c[1], c[2])]
    }

    fn conv_flat(&self) -> usize {
        let (mut h, mut w) = (self.sensors.image_height, self.sensors.image_width);
        for geom in self.conv_geometry() {
            (h, w) = geom.output_hw(h, w);
        }
        self.conv_channels[2] * h * w
    }

    pub fn validate(&self) -> Result<()> {
        if self.bev_patch == 0 || self.sensors.bev_cells % self.bev_patch != 0 {
            return Err(Error::Config("bev_patch must divide bev_cells".into()));
        }
        if self.n_lidar == 0 || self.n_cam == 0 || self.n_phy == 0 || self.tokens_per_view == 0 {
            return Err(Error::Config("token budgets must be positive".into()));
        }
        if self.sensors.image_height < 8 || self.sensors.image_width < 8 {
            return Err(Error::Config("camera images must be at least 8x8".into()));
        }
        Ok(())
    }
}

/// Fixed scaling applied to BEV heights before tokenization (meters -> ~unit).
const HEIGHT_SCALE: f64 = 0.1;

/// `[x, y, z, ln d]` for the RSU position relative to the CAV.
pub fn position_features(rsu_relative: &Point3) -> Result<[f64; 4]> {
    let d = rsu_relative.norm();
    if !(d > 0.0) {
        return Err(Error::ZeroNorm("RSU position coincides with the CAV".into()));
    }
    Ok([rsu_relative.x, rsu_relative.y, rsu_relative.z, d.ln()])
}

/// Fixed normalization of `v_phy` ahead of the position MLP.
fn normalize_position(v: [f64; 4]) -> [f64; 4] {
    [v[0] / 100.0, v[1] / 100.0, v[2] / 10.0, v[3] - 50f64.ln()]
}

/// Raw per-scene network inputs, computed once per scene.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptionInputs {
    /// `[n_patches, bev_token_dim]`: flattened patch cells plus patch center.
    pub bev_tokens: Tensor<f64>,
    /// Four `[1, H, W]` images.
    pub views: Vec<Tensor<f64>>,
    /// Normalized `[1, 4]` position features.
    pub position: Tensor<f64>,
}

impl PerceptionInputs {
    pub fn from_scene(aligned: &AlignedScene, cfg: &PerceptionConfig) -> Result<Self> {
        cfg.validate()?;
        let bev = rasterize_bev(&aligned.scatterers_local, &cfg.sensors);
        let (grid, p) = (cfg.bev_grid(), cfg.bev_patch);
        let dim = cfg.bev_token_dim();
        let mut tokens = Vec::with_capacity(grid * grid * dim);
        for bi in 0..grid {
            for bj in 0..grid {
                for i in bi * p..(bi + 1) * p {
                    for j in bj * p..(bj + 1) * p {
                        tokens.push(bev.height(i, j) * HEIGHT_SCALE);
                        tokens.push(bev.density(i, j));
                    }
                }
                tokens.push(2.0 * (bi as f64 + 0.5) / grid as f64 - 1.0);
                tokens.push(2.0 * (bj as f64 + 0.5) / grid as f64 - 1.0);
            }
        }
        let (h, w) = (cfg.sensors.image_height, cfg.sensors.image_width);
        let views = render_views(aligned, &cfg.sensors)
            .into_iter()
            .map(|img| Tensor::new(&[1, h, w], img.pixels))
            .collect::<autodiff::Result<Vec<_>>>()?;
        let pos = normalize_position(position_features(&aligned.rsu_relative)?);
        Ok(Self {
            bev_tokens: Tensor::new(&[grid * grid, dim], tokens)?,
            views,
            position: Tensor::new(&[1, 4], pos.to_vec())?,
        })
    }
}

/// Learned queries that cross-attend to a variable-length feature set.
#[derive(Debug, Clone)]
pub struct Resampler {
    pub queries: ParamId,
    pub blocks: Vec<ResamplerBlock>,
    pub n_queries: usize,
}

#[derive(Debug, Clone)]
pub struct ResamplerBlock {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ffn: FeedForward,
}

impl Resampler {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, n_queries: usize, dim: usize, heads: usize, depth: usize) -> Result<Self> {
        let queries = b.normal("queries", &[n_queries, dim], 0.02)?;
        let blocks = (0..depth)
            .map(|i| {
                let mut b = b.sub(&format!("block{i}"));
                Ok(ResamplerBlock {
                    norm_q: LayerNorm::new(&mut b.sub("norm_q"), dim)?,
                    norm_kv: LayerNorm::new(&mut b.sub("norm_kv"), dim)?,
                    attn: MultiHeadAttention::new(&mut b.sub("attn"), dim, dim, heads)?,
                    norm_ff: LayerNorm::new(&mut b.sub("norm_ff"), dim)?,
                    ffn: FeedForward::new(&mut b.sub("ffn"), dim, 4 * dim)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { queries, blocks, n_queries })
    }

    /// `features` is `[n, dim]` with any `n >= 1`; returns `[n_queries, dim]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
        let mut q = g.param(self.queries);
        for blk in &self.blocks {
            let qn = blk.norm_q.forward(g, q)?;
            let kv = blk.norm_kv.forward(g, features)?;
            let a = blk.attn.forward(g, qn, kv)?;
            q = g.add(q, a)?;
            let h = blk.norm_ff.forward(g, q)?;
            let f = blk.ffn.forward(g, h)?;
            q = g.add(q, f)?;
        }
        Ok(q)
    }
}

/// LiDAR, camera and position branches plus the fusion encoder.
#[derive(Debug, Clone)]
pub struct Perception {
    pub cfg: PerceptionConfig,
    pub dim: usize,
    pub bev_proj: Linear,
    pub lidar: Resampler,
    pub convs: Vec<Conv2d>,
    pub cam_proj: Linear,
    pub camera_id: Embedding,
    pub camera: Resampler,
    pub pos_fc1: Linear,
    pub pos_fc2: Linear,
    pub modality: Embedding,
    pub positional: Embedding,
    pub fusion: Vec<EncoderLayer>,
}

impl Perception {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &PerceptionConfig, dim: usize, heads: usize) -> Result<Self> {
        cfg.validate()?;
        let convs = cfg
            .conv_geometry()
            .into_iter()
            .enumerate()
            .map(|(i, geom)| Ok(Conv2d::new(&mut b.sub(&format!("conv{i}")), geom)?))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            dim,
            bev_proj: Linear::new(&mut b.sub("bev_proj"), cfg.bev_token_dim(), dim)?,
            lidar: Resampler::new(&mut b.sub("lidar"), cfg.n_lidar, dim, heads, cfg.resampler_depth)?,
            convs,
            cam_proj: Linear::new(&mut b.sub("cam_proj"), cfg.conv_flat(), cfg.tokens_per_view * dim)?,
            camera_id: Embedding::new(&mut b.sub("camera_id"), 4, dim, 0.02)?,
            camera: Resampler::new(&mut b.sub("camera"), cfg.n_cam, dim, heads, cfg.resampler_depth)?,
            pos_fc1: Linear::new(&mut b.sub("pos_fc1"), 4, dim)?,
            pos_fc2: Linear::new(&mut b.sub("pos_fc2"), dim, cfg.n_phy * dim)?,
            modality: Embedding::new(&mut b.sub("modality"), 3, dim, 0.02)?,
            positional: Embedding::new(&mut b.sub("positional"), cfg.env_len(), dim, 0.02)?,
            fusion: (0..cfg.fusion_depth)
                .map(|i| Ok(EncoderLayer::new(&mut b.sub(&format!("fusion{i}")), dim, heads, 4 * dim)?))
                .collect::<Result<_>>()?,
        })
    }

    pub fn encode_lidar<T: Real>(&self, g: &mut Graph<'_, T>, x: &PerceptionInputs) -> Result<Var> {
        let tokens = g.constant(x.bev_tokens.cast());
        let f = self.bev_proj.forward(g, tokens)?;
        self.lidar.forward(g, f)
    }

    /// Per-view conv encoder, flatten-projected to `tokens_per_view` tokens,
    /// tagged with the view's camera ID embedding, then resampled.
    pub fn encode_camera<T: Real>(&self, g: &mut Graph<'_, T>, x: &PerceptionInputs) -> Result<Var> {
        let per_view = self.cfg.tokens_per_view;
        let mut tokens = Vec::with_capacity(x.views.len());
        for (v, img) in x.views.iter().enumerate() {
            let mut h = g.constant(img.cast());
            for conv in &self.convs {
                h = conv.forward(g, h)?;
                h = g.gelu(h);
            }
            let flat = g.reshape(h, &[1, self.cfg.conv_flat()])?;
            let p = self.cam_proj.forward(g, flat)?;
            let p = g.reshape(p, &[per_view, self.dim])?;
            let id = self.camera_id.lookup(g, &[v])?;
            tokens.push(g.add_row(p, id)?);
        }
        let all = g.concat_rows(&tokens)?;
        self.camera.forward(g, all)
    }

    pub fn encode_position<T: Real>(&self, g: &mut Graph<'_, T>, x: &PerceptionInputs) -> Result<Var> {
        let v = g.constant(x.position.cast());
        let h = self.pos_fc1.forward(g, v)?;
        let h = g.gelu(h);
        let out = self.pos_fc2.forward(g, h)?;
        Ok(g.reshape(out, &[self.cfg.n_phy, self.dim])?)
    }

    /// Concatenate `[lidar, camera, position]`, add modality and positional
    /// embeddings and run the fusion encoder.
    pub fn fuse<T: Real>(&self, g: &mut Graph<'_, T>, lidar: Var, camera: Var, position: Var) -> Result<Var> {
        for (v, n) in [(lidar, self.cfg.n_lidar), (camera, self.cfg.n_cam), (position, self.cfg.n_phy)] {
            if g.shape(v) != [n, self.dim] {
                return Err(Error::Shape(format!("modality tokens {:?}, expected [{n}, {}]", g.shape(v), self.dim)));
            }
        }
        let seq = g.concat_rows(&[lidar, camera, position])?;
        let ids: Vec<usize> = self.cfg.modality_ranges().iter().enumerate().flat_map(|(m, r)| r.clone().map(move |_| m)).collect();
        let modality = self.modality.lookup(g, &ids)?;
        let positional = self.positional.all(g);
        let x = g.add(seq, modality)?;
        let mut x = g.add(x, positional)?;
        for layer in &self.fusion {
            x = layer.forward(g, x)?;
        }
        Ok(x)
    }

    /// `C_env` as a `[env_len, dim]` node.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: &PerceptionInputs) -> Result<Var> {
        let l = self.encode_lidar(g, x)?;
        let c = self.encode_camera(g, x)?;
        let p = self.encode_position(g, x)?;
        self.fuse(g, l, c, p)
    }
}
