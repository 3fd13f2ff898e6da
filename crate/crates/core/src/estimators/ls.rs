//! Least-squares pilot estimates and linear interpolation across subcarriers.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::simulator::{ChannelTensor, PilotObservation, PilotPattern};

/// LS estimate of the active column at each pilot, in pattern order.
#[derive(Debug, Clone, PartialEq)]
pub struct LsEstimate {
    pub pattern: PilotPattern,
    pub columns: Vec<Vec<Complex64>>,
    pub n_r: usize,
}

/// `h_{t_k}[k] = y[k] / s[k]`.
pub fn ls_estimate(obs: &PilotObservation) -> Result<LsEstimate> {
    let p = &obs.pattern;
    let columns = obs
        .received
        .iter()
        .zip(&p.symbols)
        .zip(&p.pilots)
        .map(|((y, &s), &k)| {
            if s.norm_sqr() == 0.0 {
                return Err(Error::ZeroPilot(k));
            }
            Ok(y.iter().map(|v| v / s).collect())
        })
        .collect::<Result<_>>()?;
    Ok(LsEstimate { pattern: p.clone(), columns, n_r: obs.n_r })
}

/// Linear interpolation between each transmit antenna's own pilot
/// subcarriers, holding the nearest value beyond the first/last pilot.
pub fn interpolate(ls: &LsEstimate, delta_f: f64) -> Result<ChannelTensor> {
    let p = &ls.pattern;
    let mut h = ChannelTensor::zeros(ls.n_r, p.n_t, p.n_c, delta_f);
    for t in 0..p.n_t {
        let idx: Vec<usize> = p.pilots_of(t).collect();
        if idx.is_empty() {
            return Err(Error::AntennaWithoutPilot(t));
        }
        let ks: Vec<usize> = idx.iter().map(|&i| p.pilots[i]).collect();
        let mut seg = 0;
        for k in 0..p.n_c {
            while seg + 1 < ks.len() && ks[seg + 1] <= k {
                seg += 1;
            }
            for r in 0..ls.n_r {
                let v = if k <= ks[0] {
                    ls.columns[idx[0]][r]
                } else if seg + 1 >= ks.len() {
                    ls.columns[idx[seg]][r]
                } else {
                    let (k0, k1) = (ks[seg] as f64, ks[seg + 1] as f64);
                    let a = (k as f64 - k0) / (k1 - k0);
                    ls.columns[idx[seg]][r] * (1.0 - a) + ls.columns[idx[seg + 1]][r] * a
                };
                h.set(r, t, k, v);
            }
        }
    }
    Ok(h)
}

/// LS followed by interpolation.
pub fn ls_interpolated(obs: &PilotObservation, delta_f: f64) -> Result<ChannelTensor> {
    interpolate(&ls_estimate(obs)?, delta_f)
}
