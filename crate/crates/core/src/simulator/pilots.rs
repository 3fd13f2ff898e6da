//! Interleaved pilot patterns and noisy pilot transmission.

use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};

use super::channel::ChannelTensor;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct PilotPattern {
    pub spacing: usize,
    pub n_c: usize,
    pub n_t: usize,
    /// Pilot subcarriers `0, S, 2S, ...`.
    pub pilots: Vec<usize>,
    /// Active transmit antenna for each entry of `pilots`.
    pub antennas: Vec<usize>,
    pub symbols: Vec<Complex64>,
}

impl PilotPattern {
    /// Antennas are assigned cyclically in pilot order; all symbols are 1.
    pub fn interleaved(spacing: usize, n_c: usize, n_t: usize) -> Result<Self> {
        if spacing == 0 || n_t == 0 || n_c == 0 {
            return Err(Error::Config(format!("invalid pilot pattern S={spacing}, N_c={n_c}, N_t={n_t}")));
        }
        let pilots: Vec<usize> = (0..n_c).step_by(spacing).collect();
        let antennas = (0..pilots.len()).map(|i| i % n_t).collect();
        let symbols = vec![Complex64::new(1.0, 0.0); pilots.len()];
        Ok(Self { spacing, n_c, n_t, pilots, antennas, symbols })
    }

    pub fn len(&self) -> usize {
        self.pilots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pilots.is_empty()
    }

    /// Pilot indices (into `pilots`) assigned to antenna `t`.
    pub fn pilots_of(&self, t: usize) -> impl Iterator<Item = usize> + '_ {
        self.antennas.iter().enumerate().filter(move |(_, a)| **a == t).map(|(i, _)| i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Noise {
    /// Exact `y = h s`.
    None,
    /// `sigma^2 = signal_power / 10^(snr_db / 10)`.
    Snr { snr_db: f64, signal_power: f64 },
}

impl Noise {
    pub fn variance(self) -> f64 {
        match self {
            Noise::None => 0.0,
            Noise::Snr { snr_db, signal_power } => signal_power / 10f64.powf(snr_db / 10.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PilotObservation {
    /// One `n_r` vector per pilot subcarrier.
    pub received: Vec<Vec<Complex64>>,
    pub pattern: PilotPattern,
    pub noise_variance: f64,
    pub snr_db: Option<f64>,
    pub n_r: usize,
}

/// Circularly-symmetric complex Gaussian with total variance `var`.
pub fn complex_gaussian(rng: &mut impl rand::Rng, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

/// `y[k] = h_{t_k}[k] s[k] + n[k]` with `n ~ CN(0, sigma^2 I)`.
pub fn transmit(channel: &ChannelTensor, pattern: &PilotPattern, noise: Noise, seed: u64) -> Result<PilotObservation> {
    if pattern.n_c != channel.n_c || pattern.n_t != channel.n_t {
        return Err(Error::Shape(format!(
            "pattern (N_c={}, N_t={}) vs channel (N_c={}, N_t={})",
            pattern.n_c, pattern.n_t, channel.n_c, channel.n_t
        )));
    }
    let var = noise.variance();
    let mut rng = rng::stream(seed, 0, "pilot-noise");
    let received = pattern
        .pilots
        .iter()
        .zip(&pattern.antennas)
        .zip(&pattern.symbols)
        .map(|((&k, &t), &s)| {
            (0..channel.n_r)
                .map(|r| {
                    let y = channel.get(r, t, k) * s;
                    if var > 0.0 {
                        y + complex_gaussian(&mut rng, var)
                    } else {
                        y
                    }
                })
                .collect()
        })
        .collect();
    let snr_db = match noise {
        Noise::None => None,
        Noise::Snr { snr_db, .. } => Some(snr_db),
    };
    Ok(PilotObservation { received, pattern: pattern.clone(), noise_variance: var, snr_db, n_r: channel.n_r })
}
