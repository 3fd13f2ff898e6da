//! Unconditional flow matching on a 2-dimensional Gaussian, used as a
//! sanity check of the objective and the Euler sampler.

use autodiff::nn::Linear;
use autodiff::{cosine_lr, AdamW, AdamWConfig, Builder, Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::flow::euler;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
    pub hidden: usize,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { mean: [2.0, -1.0], cov: [[1.0, 0.6], [0.6, 0.8]], hidden: 64, steps: 3000, batch: 256, lr: 2e-3, seed: 1 }
    }
}

impl ToyConfig {
    /// Lower Cholesky factor of the target covariance.
    fn chol(&self) -> Result<[[f64; 2]; 2]> {
        let [[a, b], [_, d]] = self.cov;
        if !(a > 0.0) || !(d - b * b / a > 0.0) {
            return Err(Error::Config("target covariance is not positive definite".into()));
        }
        let l00 = a.sqrt();
        let l10 = b / l00;
        Ok([[l00, 0.0], [l10, (d - l10 * l10).sqrt()]])
    }

    pub fn draw_target(&self, rng: &mut impl Rng) -> Result<[f64; 2]> {
        let l = self.chol()?;
        let z: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
        Ok([self.mean[0] + l[0][0] * z[0], self.mean[1] + l[1][0] * z[0] + l[1][1] * z[1]])
    }
}

/// `[x, t] -> hidden -> hidden -> 2` GELU MLP.
pub struct ToyFlow {
    pub params: ParamStore<f32>,
    layers: [Linear; 3],
}

impl ToyFlow {
    pub fn new(hidden: usize, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut params, &mut rng);
        let layers = [
            Linear::new(&mut b.sub("fc1"), 3, hidden)?,
            Linear::new(&mut b.sub("fc2"), hidden, hidden)?,
            Linear::new(&mut b.sub("fc3"), hidden, 2)?,
        ];
        Ok(Self { params, layers })
    }

    fn forward(&self, g: &mut Graph<'_, f32>, xs: &[[f64; 2]], ts: &[f64]) -> Result<autodiff::Var> {
        let input: Vec<f32> = xs.iter().zip(ts).flat_map(|(x, &t)| [x[0] as f32, x[1] as f32, t as f32]).collect();
        let mut h = g.constant(Tensor::new(&[xs.len(), 3], input)?);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i < 2 {
                h = g.gelu(h);
            }
        }
        Ok(h)
    }

    pub fn velocity(&self, xs: &[[f64; 2]], t: f64) -> Result<Vec<[f64; 2]>> {
        let mut g = Graph::with_params(&self.params);
        let v = self.forward(&mut g, xs, &vec![t; xs.len()])?;
        Ok(g.value(v).data().chunks(2).map(|c| [c[0] as f64, c[1] as f64]).collect())
    }

    /// Euler samples from standard normal starting points.
    pub fn sample(&self, n: usize, steps: usize, seed: u64) -> Result<Vec<[f64; 2]>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.sample(StandardNormal), rng.sample(StandardNormal)]).collect();
        let out = euler(x0, steps, |x, t| {
            let pts: Vec<[f64; 2]> = x.iter().map(|p| [p[0], p[1]]).collect();
            Ok(self.velocity(&pts, t)?.into_iter().map(|v| v.to_vec()).collect())
        })?;
        Ok(out.into_iter().map(|p| [p[0], p[1]]).collect())
    }
}

/// Train the toy model; returns it with the per-step losses.
pub fn train_toy(cfg: &ToyConfig) -> Result<(ToyFlow, Vec<f64>)> {
    let mut model = ToyFlow::new(cfg.hidden, cfg.seed)?;
    let mut opt = AdamW::new(&model.params, AdamWConfig { weight_decay: 0.0, ..Default::default() });
    let mut rng = crate::rng::stream(cfg.seed, 0, "toy-train");
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let mut xs = Vec::with_capacity(cfg.batch);
        let mut ts = Vec::with_capacity(cfg.batch);
        let mut target = Vec::with_capacity(2 * cfg.batch);
        for _ in 0..cfg.batch {
            let x1 = cfg.draw_target(&mut rng)?;
            let x0: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let t: f64 = rng.random();
            xs.push([t * x1[0] + (1.0 - t) * x0[0], t * x1[1] + (1.0 - t) * x0[1]]);
            ts.push(t);
            target.extend([(x1[0] - x0[0]) as f32, (x1[1] - x0[1]) as f32]);
        }
        let (loss, grads) = {
            let mut g = Graph::with_params(&model.params);
            let v = model.forward(&mut g, &xs, &ts)?;
            let l = g.mse(v, &target)?;
            (g.value(l).data()[0] as f64, g.backward(l)?)
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite { step, detail: "toy loss".into() });
        }
        opt.step(&mut model.params, &grads, cosine_lr(step, cfg.steps, cfg.lr, cfg.lr * 0.01)?)?;
        losses.push(loss);
    }
    Ok((model, losses))
}

/// Sample mean and unbiased covariance.
pub fn moments(samples: &[[f64; 2]]) -> ([f64; 2], [[f64; 2]; 2]) {
    let n = samples.len() as f64;
    let m = [samples.iter().map(|p| p[0]).sum::<f64>() / n, samples.iter().map(|p| p[1]).sum::<f64>() / n];
    let mut c = [[0.0; 2]; 2];
    for p in samples {
        let d = [p[0] - m[0], p[1] - m[1]];
        for i in 0..2 {
            for j in 0..2 {
                c[i][j] += d[i] * d[j] / (n - 1.0);
            }
        }
    }
    (m, c)
}
