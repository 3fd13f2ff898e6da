use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::params::ParamStore;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
    step_count: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros: Vec<Vec<T>> = store.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
        Self { config, first_moment: zeros.clone(), second_moment: zeros, step_count: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.first_moment, &self.second_moment)
    }

    /// One update of every parameter. Parameters absent from `grads` are
    /// treated as having a zero gradient (they still decay).
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if store.len() != self.first_moment.len() {
            return Err(Error::InvalidArgument {
                op: "adamw_step",
                msg: format!("optimizer tracks {} params, store has {}", self.first_moment.len(), store.len()),
            });
        }
        self.step_count += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let one = T::one();
        let bc1 = one - b1.powi(self.step_count as i32);
        let bc2 = one - b2.powi(self.step_count as i32);
        let eta = T::lit(lr);
        let lambda = T::lit(c.weight_decay);
        let eps = T::lit(c.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let grad = grads.get(id);
            let theta = store.get_mut(id).data_mut();
            if let Some(g) = grad {
                if g.numel() != theta.len() {
                    return Err(Error::ShapeMismatch {
                        op: "adamw_step",
                        lhs: vec![theta.len()],
                        rhs: g.shape().to_vec(),
                    });
                }
            }
            let m = &mut self.first_moment[id.0];
            let v = &mut self.second_moment[id.0];
            for i in 0..theta.len() {
                let gi = grad.map_or(T::zero(), |g| g.data()[i]);
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] = theta[i] - eta * lambda * theta[i] - eta * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_max: f64, lr_min: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidArgument {
            op: "cosine_lr",
            msg: format!("step {step} beyond schedule length {total_steps}"),
        });
    }
    if total_steps == 0 {
        return Ok(lr_max);
    }
    let frac = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}
