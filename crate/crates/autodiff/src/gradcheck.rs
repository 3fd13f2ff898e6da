//! Central finite-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Relative discrepancy between an analytic and a numeric derivative.
///
/// The denominator is floored at `1e-6` so that derivatives that are zero up
/// to rounding noise do not produce spurious failures.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
}

/// Compare the gradients of a scalar function of `inputs` against central
/// differences with step `h`.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).data()[0])
    };

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut work = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let orig = t.data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic[i][j], numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_relative_error: worst, checked })
}

/// Same check for every scalar of every parameter in `store`. `stride`
/// subsamples entries (1 checks all of them).
pub fn check_params<F>(store: &ParamStore<f64>, h: f64, stride: usize, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::with_params(store);
        let root = f(&mut g)?;
        g.backward(root)?
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let root = f(&mut g)?;
        Ok(g.value(root).data()[0])
    };
    let mut work = store.clone();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let ids: Vec<_> = store.ids().collect();
    let mut counter = 0usize;
    for id in ids {
        let n = store.get(id).numel();
        for j in 0..n {
            counter += 1;
            if (counter - 1) % stride.max(1) != 0 {
                continue;
            }
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[j]);
            worst = worst.max(relative_error(analytic, numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_relative_error: worst, checked })
}
