//! NMSE and cosine similarity over evaluation sets.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::simulator::ChannelTensor;

/// Reported value for a perfect estimate.
pub const NMSE_FLOOR_DB: f64 = -100.0;

pub fn to_db(linear: f64) -> f64 {
    if linear <= 0.0 {
        NMSE_FLOOR_DB
    } else {
        (10.0 * linear.log10()).max(NMSE_FLOOR_DB)
    }
}

fn check_dims(h: &ChannelTensor, est: &ChannelTensor) -> Result<()> {
    if h.dims() != est.dims() {
        return Err(Error::Shape(format!("truth {:?} vs estimate {:?}", h.dims(), est.dims())));
    }
    Ok(())
}

/// Set-level NMSE: summed squared errors over summed truth energy.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NmseAccumulator {
    pub error: f64,
    pub energy: f64,
    pub count: usize,
}

impl NmseAccumulator {
    pub fn add(&mut self, h: &ChannelTensor, est: &ChannelTensor) -> Result<()> {
        check_dims(h, est)?;
        self.error += h.data.iter().zip(&est.data).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>();
        self.energy += h.norm_sqr();
        self.count += 1;
        Ok(())
    }

    pub fn linear(&self) -> Result<f64> {
        if !(self.energy > 0.0) {
            return Err(Error::ZeroNorm("evaluation set has zero channel energy".into()));
        }
        Ok(self.error / self.energy)
    }

    pub fn db(&self) -> Result<f64> {
        Ok(to_db(self.linear()?))
    }
}

pub fn nmse(h: &ChannelTensor, est: &ChannelTensor) -> Result<f64> {
    let mut acc = NmseAccumulator::default();
    acc.add(h, est)?;
    acc.linear()
}

/// `|tr(A^H B)| / (|A|_F |B|_F)` for two equally long element lists.
fn cosine_of(a: impl Iterator<Item = Complex64> + Clone, b: impl Iterator<Item = Complex64> + Clone) -> Option<f64> {
    let na: f64 = a.clone().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let nb: f64 = b.clone().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if !(na > 0.0 && nb > 0.0) {
        return None;
    }
    let tr: Complex64 = a.zip(b).map(|(x, y)| x.conj() * y).sum();
    Some((tr.norm() / (na * nb)).min(1.0))
}

fn subcarrier(h: &ChannelTensor, k: usize) -> impl Iterator<Item = Complex64> + Clone + '_ {
    (0..h.n_r).flat_map(move |r| (0..h.n_t).map(move |t| h.get(r, t, k)))
}

/// Mean over subcarriers of the per-subcarrier `N_r x N_t` cosine.
pub fn cosine_sim(h: &ChannelTensor, est: &ChannelTensor) -> Result<f64> {
    check_dims(h, est)?;
    let mut sum = 0.0;
    for k in 0..h.n_c {
        sum += cosine_of(subcarrier(h, k), subcarrier(est, k)).ok_or_else(|| Error::ZeroNorm(format!("subcarrier {k}")))?;
    }
    Ok(sum / h.n_c as f64)
}

/// Cosine of the whole tensors viewed as one matrix.
pub fn cosine_sim_flat(h: &ChannelTensor, est: &ChannelTensor) -> Result<f64> {
    check_dims(h, est)?;
    cosine_of(h.data.iter().copied(), est.data.iter().copied()).ok_or_else(|| Error::ZeroNorm("channel tensor".into()))
}

/// Average cosine over a set; zero-norm matrices are skipped and counted.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CosineAccumulator {
    pub flat: bool,
    pub sum: f64,
    pub terms: usize,
    pub skipped: usize,
}

impl CosineAccumulator {
    pub fn new(flat: bool) -> Self {
        Self { flat, ..Default::default() }
    }

    pub fn add(&mut self, h: &ChannelTensor, est: &ChannelTensor) -> Result<()> {
        check_dims(h, est)?;
        let mut push = |c: Option<f64>| match c {
            Some(c) => {
                self.sum += c;
                self.terms += 1;
            }
            None => self.skipped += 1,
        };
        if self.flat {
            push(cosine_of(h.data.iter().copied(), est.data.iter().copied()));
        } else {
            for k in 0..h.n_c {
                push(cosine_of(subcarrier(h, k), subcarrier(est, k)));
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> Result<f64> {
        if self.terms == 0 {
            return Err(Error::ZeroNorm("every cosine term was skipped".into()));
        }
        Ok(self.sum / self.terms as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn nmse_examples() {
        let h = ChannelTensor::from_fn(1, 1, 1, 1.0, |_, _, _| c(1.0, 0.0));
        assert_eq!(nmse(&h, &h).unwrap(), 0.0);
        assert_eq!(to_db(nmse(&h, &h).unwrap()), NMSE_FLOOR_DB);
        assert_eq!(nmse(&h, &ChannelTensor::zeros(1, 1, 1, 1.0)).unwrap(), 1.0);
        let half = ChannelTensor::from_fn(1, 1, 1, 1.0, |_, _, _| c(0.5, 0.0));
        assert_eq!(nmse(&h, &half).unwrap(), 0.25);
        assert!((to_db(0.25) + 6.0206).abs() < 1e-4);
        let z = ChannelTensor::zeros(1, 1, 1, 1.0);
        assert!(nmse(&z, &h).is_err());
    }

    #[test]
    fn cosine_examples() {
        let h = ChannelTensor::from_fn(1, 2, 1, 1.0, |_, t, _| c(if t == 0 { 1.0 } else { 0.0 }, 0.0));
        let e = ChannelTensor::from_fn(1, 2, 1, 1.0, |_, _, _| c(0.5f64.sqrt(), 0.0));
        assert!((cosine_sim(&h, &e).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(cosine_sim(&h, &h).unwrap(), 1.0);
        assert!(cosine_sim(&h, &ChannelTensor::zeros(1, 2, 1, 1.0)).is_err());
        let mut acc = CosineAccumulator::new(false);
        acc.add(&h, &ChannelTensor::zeros(1, 2, 1, 1.0)).unwrap();
        acc.add(&h, &h).unwrap();
        assert_eq!((acc.mean().unwrap(), acc.skipped), (1.0, 1));
    }
}
