//! Vectorized LMMSE estimation from an empirical channel covariance.

use nalgebra::{Cholesky, DMatrix, DVector};
use num_complex::Complex64;

use super::covariance::{devectorize, vec_index, ChannelCovariance};
use crate::error::{Error, Result};
use crate::simulator::{ChannelTensor, PilotObservation, PilotPattern};

/// Precomputed filter `W = C A^H (A C A^H + sigma^2 I)^{-1}` for one pilot
/// pattern and noise level.
#[derive(Debug, Clone)]
pub struct LmmseFilter {
    /// Vectorized-channel index of each stacked observation.
    rows: Vec<usize>,
    /// Pilot symbol scaling each stacked observation.
    scales: Vec<Complex64>,
    gain: DMatrix<Complex64>,
    mean: DVector<Complex64>,
    n_r: usize,
    n_t: usize,
    n_c: usize,
}

/// Stacked observation order: pilot-major, receive antenna fastest.
fn selection(pattern: &PilotPattern, n_r: usize) -> (Vec<usize>, Vec<Complex64>) {
    let mut rows = Vec::with_capacity(pattern.len() * n_r);
    let mut scales = Vec::with_capacity(pattern.len() * n_r);
    for ((&k, &t), &s) in pattern.pilots.iter().zip(&pattern.antennas).zip(&pattern.symbols) {
        for r in 0..n_r {
            rows.push(vec_index(n_r, pattern.n_t, r, t, k));
            scales.push(s);
        }
    }
    (rows, scales)
}

impl LmmseFilter {
    pub fn new(cov: &ChannelCovariance, pattern: &PilotPattern, noise_variance: f64) -> Result<Self> {
        if pattern.n_t != cov.n_t || pattern.n_c != cov.n_c {
            return Err(Error::Shape(format!(
                "pattern (N_t={}, N_c={}) vs covariance (N_t={}, N_c={})",
                pattern.n_t, pattern.n_c, cov.n_t, cov.n_c
            )));
        }
        if noise_variance <= 0.0 {
            return Err(Error::Config("LMMSE needs a positive noise variance".into()));
        }
        let (rows, scales) = selection(pattern, cov.n_r);
        let m = rows.len();
        let n = cov.dim();
        // C A^H: column j is column rows[j] of C times conj(s_j).
        let c_ah = DMatrix::from_fn(n, m, |i, j| cov.cov[(i, rows[j])] * scales[j].conj());
        let mut innov = DMatrix::from_fn(m, m, |i, j| scales[i] * c_ah[(rows[i], j)]);
        for i in 0..m {
            innov[(i, i)] += noise_variance;
        }
        let chol = match Cholesky::new(innov.clone()) {
            Some(c) => c,
            None => {
                let trace: f64 = (0..m).map(|i| innov[(i, i)].re).sum();
                let eps = 1e-9 * trace / m as f64;
                for i in 0..m {
                    innov[(i, i)] += eps;
                }
                Cholesky::new(innov).ok_or(Error::Singular)?
            }
        };
        // W = C A^H S^{-1}  <=>  S W^H = (C A^H)^H with S Hermitian.
        let gain = chol.solve(&c_ah.adjoint()).adjoint();
        Ok(Self {
            rows,
            scales,
            gain,
            mean: DVector::from_column_slice(&cov.mean),
            n_r: cov.n_r,
            n_t: cov.n_t,
            n_c: cov.n_c,
        })
    }

    pub fn estimate(&self, obs: &PilotObservation, delta_f: f64) -> Result<ChannelTensor> {
        if obs.n_r != self.n_r || obs.received.len() * self.n_r != self.rows.len() {
            return Err(Error::Shape("observation does not match the LMMSE filter".into()));
        }
        let y = DVector::from_iterator(self.rows.len(), obs.received.iter().flatten().copied());
        let a_mu = DVector::from_fn(self.rows.len(), |i, _| self.scales[i] * self.mean[self.rows[i]]);
        let h = &self.mean + &self.gain * (y - a_mu);
        Ok(devectorize(h.as_slice(), self.n_r, self.n_t, self.n_c, delta_f))
    }
}

/// `h = mu + C A^H (A C A^H + sigma^2 I)^{-1} (y - A mu)`.
pub fn lmmse_estimate(obs: &PilotObservation, cov: &ChannelCovariance, delta_f: f64) -> Result<ChannelTensor> {
    LmmseFilter::new(cov, &obs.pattern, obs.noise_variance)?.estimate(obs, delta_f)
}
