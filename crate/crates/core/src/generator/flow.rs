//! Straight-line probability path, guidance combination and Euler
//! integration of a velocity field.

use crate::error::{Error, Result};

/// One point on the straight path from `h0` to `h1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub h0: Vec<f64>,
    pub h1: Vec<f64>,
    pub t: f64,
    pub ht: Vec<f64>,
    pub v_target: Vec<f64>,
}

impl FlowState {
    pub fn new(h0: Vec<f64>, h1: Vec<f64>, t: f64) -> Result<Self> {
        if h0.len() != h1.len() {
            return Err(Error::Shape(format!("h0 has {} elements, h1 {}", h0.len(), h1.len())));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("t = {t} outside [0, 1]")));
        }
        let ht = interpolate(&h0, &h1, t);
        let v_target = h1.iter().zip(&h0).map(|(a, b)| a - b).collect();
        Ok(Self { h0, h1, t, ht, v_target })
    }
}

/// `t * h1 + (1 - t) * h0`, elementwise.
pub fn interpolate(h0: &[f64], h1: &[f64], t: f64) -> Vec<f64> {
    h0.iter().zip(h1).map(|(a, b)| t * b + (1.0 - t) * a).collect()
}

/// Guided velocity `v_null + w (v_env - v_null)`, evaluated as
/// `(1 - w) v_null + w v_env` so `w = 0` and `w = 1` return an input
/// unchanged.
pub fn cfg_combine(v_null: &[f64], v_env: &[f64], w: f64) -> Vec<f64> {
    v_null.iter().zip(v_env).map(|(n, e)| (1.0 - w) * n + w * e).collect()
}

/// Euler integration of `dx/dt = v(x, t)` from `t = 0` to `t = 1` in
/// `steps` uniform steps. `velocity` receives a batch of states.
pub fn euler<F>(mut x: Vec<Vec<f64>>, steps: usize, mut velocity: F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[Vec<f64>], f64) -> Result<Vec<Vec<f64>>>,
{
    if steps == 0 {
        return Err(Error::Config("sampling needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    for i in 0..steps {
        let t = i as f64 * dt;
        let v = velocity(&x, t)?;
        if v.len() != x.len() {
            return Err(Error::Shape(format!("velocity batch {} for {} states", v.len(), x.len())));
        }
        for (xs, vs) in x.iter_mut().zip(&v) {
            if xs.len() != vs.len() {
                return Err(Error::Shape(format!("velocity has {} elements, state {}", vs.len(), xs.len())));
            }
            xs.iter_mut().zip(vs).for_each(|(a, b)| *a += dt * b);
        }
    }
    Ok(x)
}
