//! Geometric multipath synthesis and the frequency-domain channel tensor.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::align::AlignedScene;
use super::scene::{Material, Point3};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RfConfig {
    pub carrier_hz: f64,
    pub delta_f: f64,
    pub speed_of_light: f64,
    /// Element spacing in wavelengths.
    pub antenna_spacing: f64,
    pub n_r: usize,
    pub n_t: usize,
    pub n_c: usize,
    pub reflection: f64,
    pub foliage_reflection: f64,
    /// Reference distance of the free-space gain law (meters).
    pub reference_distance: f64,
    /// Effective scattering length of a single-bounce point (meters).
    pub scatter_length: f64,
    pub los_enabled: bool,
}

impl Default for RfConfig {
    fn default() -> Self {
        Self {
            carrier_hz: 28e9,
            delta_f: 120e3,
            speed_of_light: 299_792_458.0,
            antenna_spacing: 0.5,
            n_r: 4,
            n_t: 4,
            n_c: 64,
            reflection: 0.3,
            foliage_reflection: 0.05,
            reference_distance: 10.0,
            scatter_length: 20.0,
            los_enabled: true,
        }
    }
}

impl RfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_r == 0 || self.n_t == 0 || self.n_c == 0 {
            return Err(Error::Config("antenna and subcarrier counts must be positive".into()));
        }
        if self.delta_f <= 0.0 || self.carrier_hz <= 0.0 || self.speed_of_light <= 0.0 {
            return Err(Error::Config("frequencies and speed of light must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    /// Rank-1 gain matrix `n_r x n_t`.
    pub gain: DMatrix<Complex64>,
    pub delay: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PathSet {
    pub paths: Vec<Path>,
}

impl PathSet {
    pub fn num_paths(&self) -> usize {
        self.paths.len()
    }
}

/// ULA response `a(u)_n = exp(-j 2 pi d n u)` for direction cosine `u`.
pub fn steering(n: usize, spacing: f64, u: f64) -> DVector<Complex64> {
    DVector::from_fn(n, |i, _| Complex64::from_polar(1.0, -2.0 * PI * spacing * i as f64 * u))
}

/// Complex path gain: carrier phase of the delay plus a random offset.
fn path_gain(rf: &RfConfig, amp: f64, delay: f64, offset: f64) -> Complex64 {
    let cycles = rf.carrier_hz * delay;
    Complex64::from_polar(amp, -2.0 * PI * cycles.fract() + offset)
}

/// One LOS path (when enabled and visible) plus one single-bounce path per
/// scatterer. The CAV array lies along the body +y axis; the RSU array
/// along its heading.
pub fn synthesize_paths(aligned: &AlignedScene, rf: &RfConfig, seed: u64) -> Result<PathSet> {
    rf.validate()?;
    let los = rf.los_enabled && aligned.los_visible;
    if !los && aligned.scatterers_local.is_empty() {
        return Err(Error::NoPaths);
    }
    let mut phase_rng = rng::stream(seed, 0, "path-phase");
    let rsu = aligned.rsu_relative;
    let rsu_axis = Point3::new(aligned.rsu_heading_local.cos(), aligned.rsu_heading_local.sin(), 0.0);
    let cav_axis = Point3::new(0.0, 1.0, 0.0);
    let d_ref = rf.reference_distance;

    let mut paths = Vec::with_capacity(aligned.scatterers_local.len() + 1);
    let mut push = |first: Point3, last: Point3, length: f64, amp: f64, offset: f64| {
        // Arrival direction seen from the CAV at the origin; departure from the RSU.
        let u_r = cav_axis.dot(&last) / last.norm().max(1e-12);
        let dep = first - rsu;
        let u_t = rsu_axis.dot(&dep) / dep.norm().max(1e-12);
        let a_r = steering(rf.n_r, rf.antenna_spacing, u_r);
        let a_t = steering(rf.n_t, rf.antenna_spacing, u_t);
        let delay = length / rf.speed_of_light;
        let alpha = path_gain(rf, amp, delay, offset);
        paths.push(Path { gain: (a_r * a_t.adjoint()) * alpha, delay });
    };

    if los {
        let d = aligned.rsu_distance;
        let offset = phase_rng.random_range(-PI..PI);
        push(Point3::zeros(), rsu, d, d_ref / d.max(1e-3), offset);
    }
    for (p, m) in aligned.scatterers_local.iter().zip(&aligned.materials) {
        let leg1 = (p - rsu).norm().max(1e-3);
        let leg2 = p.norm().max(1e-3);
        let rho = match m {
            Material::Building => rf.reflection,
            Material::Foliage => rf.foliage_reflection,
        };
        let offset = phase_rng.random_range(-PI..PI);
        push(*p, *p, leg1 + leg2, rho * d_ref * rf.scatter_length / (leg1 * leg2), offset);
    }
    Ok(PathSet { paths })
}

/// Complex channel `H[r, t, k]`, stored with the subcarrier index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTensor {
    pub data: Vec<Complex64>,
    pub n_r: usize,
    pub n_t: usize,
    pub n_c: usize,
    pub delta_f: f64,
}

impl ChannelTensor {
    pub fn zeros(n_r: usize, n_t: usize, n_c: usize, delta_f: f64) -> Self {
        Self { data: vec![Complex64::new(0.0, 0.0); n_r * n_t * n_c], n_r, n_t, n_c, delta_f }
    }

    pub fn from_fn(n_r: usize, n_t: usize, n_c: usize, delta_f: f64, mut f: impl FnMut(usize, usize, usize) -> Complex64) -> Self {
        let mut h = Self::zeros(n_r, n_t, n_c, delta_f);
        for r in 0..n_r {
            for t in 0..n_t {
                for k in 0..n_c {
                    h.data[(r * n_t + t) * n_c + k] = f(r, t, k);
                }
            }
        }
        h
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n_r, self.n_t, self.n_c)
    }

    #[inline]
    pub fn index(&self, r: usize, t: usize, k: usize) -> usize {
        (r * self.n_t + t) * self.n_c + k
    }

    #[inline]
    pub fn get(&self, r: usize, t: usize, k: usize) -> Complex64 {
        self.data[self.index(r, t, k)]
    }

    #[inline]
    pub fn set(&mut self, r: usize, t: usize, k: usize, v: Complex64) {
        let i = self.index(r, t, k);
        self.data[i] = v;
    }

    /// Column `t` of `H[k]` (length `n_r`).
    pub fn column(&self, t: usize, k: usize) -> Vec<Complex64> {
        (0..self.n_r).map(|r| self.get(r, t, k)).collect()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Round every component to 32-bit precision (the on-disk precision).
    pub fn quantize_f32(&mut self) {
        for z in &mut self.data {
            *z = Complex64::new(z.re as f32 as f64, z.im as f32 as f64);
        }
    }
}

/// `H[k] = sum_l A_l exp(-j 2 pi k delta_f tau_l)`.
pub fn channel_tensor(paths: &PathSet, n_r: usize, n_t: usize, delta_f: f64, n_c: usize) -> Result<ChannelTensor> {
    let mut h = ChannelTensor::zeros(n_r, n_t, n_c, delta_f);
    for p in &paths.paths {
        if p.gain.shape() != (n_r, n_t) {
            return Err(Error::Shape(format!("path gain {:?} vs channel ({n_r}, {n_t})", p.gain.shape())));
        }
        let phases: Vec<Complex64> = (0..n_c)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * (k as f64) * delta_f * p.delay))
            .collect();
        for r in 0..n_r {
            for t in 0..n_t {
                let a = p.gain[(r, t)];
                let base = (r * n_t + t) * n_c;
                for (k, ph) in phases.iter().enumerate() {
                    h.data[base + k] += a * ph;
                }
            }
        }
    }
    Ok(h)
}
