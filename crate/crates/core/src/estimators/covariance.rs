//! Empirical channel covariance and the MCFC cache file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::simulator::ChannelTensor;

const MAGIC: &[u8; 4] = b"MCFC";
const VERSION: u32 = 1;

/// Position of `H[r, t, k]` in the vectorized channel: receive antenna
/// fastest, then transmit antenna, then subcarrier.
#[inline]
pub fn vec_index(n_r: usize, n_t: usize, r: usize, t: usize, k: usize) -> usize {
    r + n_r * (t + n_t * k)
}

pub fn vectorize(h: &ChannelTensor) -> Vec<Complex64> {
    let mut v = vec![Complex64::new(0.0, 0.0); h.data.len()];
    for r in 0..h.n_r {
        for t in 0..h.n_t {
            for k in 0..h.n_c {
                v[vec_index(h.n_r, h.n_t, r, t, k)] = h.get(r, t, k);
            }
        }
    }
    v
}

pub fn devectorize(v: &[Complex64], n_r: usize, n_t: usize, n_c: usize, delta_f: f64) -> ChannelTensor {
    ChannelTensor::from_fn(n_r, n_t, n_c, delta_f, |r, t, k| v[vec_index(n_r, n_t, r, t, k)])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelCovariance {
    pub n_r: usize,
    pub n_t: usize,
    pub n_c: usize,
    pub mean: Vec<Complex64>,
    pub cov: DMatrix<Complex64>,
    pub sample_count: usize,
}

impl ChannelCovariance {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased sample covariance of the vectorized channels.
///
/// The centered samples are split into real and imaginary parts `[A | B]`
/// and one real Gram product gives `Re C = A'A + B'B`, `Im C = B'A - A'B`
/// (up to the `1/(N-1)` factor). The result is symmetrized so it is
/// Hermitian bit for bit.
pub fn empirical_covariance(samples: &[&ChannelTensor]) -> Result<ChannelCovariance> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: samples.len() });
    }
    let (n_r, n_t, n_c) = samples[0].dims();
    let n = n_r * n_t * n_c;
    let count = samples.len();
    let vecs: Vec<Vec<Complex64>> = samples
        .iter()
        .map(|h| {
            if h.dims() != (n_r, n_t, n_c) {
                return Err(Error::Shape(format!("covariance sample dims {:?} vs {:?}", h.dims(), (n_r, n_t, n_c))));
            }
            Ok(vectorize(h))
        })
        .collect::<Result<_>>()?;
    let mut mean = vec![Complex64::new(0.0, 0.0); n];
    for v in &vecs {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);

    let w = 2 * n;
    let mut z = vec![0.0f64; count * w];
    for (s, v) in vecs.iter().enumerate() {
        let row = &mut z[s * w..(s + 1) * w];
        for i in 0..n {
            let d = v[i] - mean[i];
            row[i] = d.re;
            row[n + i] = d.im;
        }
    }
    let mut gram = vec![0.0f64; w * w];
    autodiff::scalar::gemm(w, count, w, 1.0 / (count - 1) as f64, &z, true, &z, false, 0.0, &mut gram);

    let g = |i: usize, j: usize| gram[i * w + j];
    let raw = DMatrix::from_fn(n, n, |i, j| {
        Complex64::new(g(i, j) + g(n + i, n + j), g(n + i, j) - g(i, n + j))
    });
    let cov = DMatrix::from_fn(n, n, |i, j| (raw[(i, j)] + raw[(j, i)].conj()) * 0.5);
    Ok(ChannelCovariance { n_r, n_t, n_c, mean, cov, sample_count: count })
}

pub fn write_covariance(path: &Path, c: &ChannelCovariance) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    for d in [c.n_r, c.n_t, c.n_c] {
        w.write_u32::<LE>(d as u32)?;
    }
    w.write_u64::<LE>(c.sample_count as u64)?;
    for z in c.mean.iter().chain(c.cov.iter()) {
        w.write_f64::<LE>(z.re)?;
        w.write_f64::<LE>(z.im)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_covariance(path: &Path) -> Result<ChannelCovariance> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an MCFC covariance file".into()));
    }
    let version = r.read_u32::<LE>()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported covariance version {version}")));
    }
    let n_r = r.read_u32::<LE>()? as usize;
    let n_t = r.read_u32::<LE>()? as usize;
    let n_c = r.read_u32::<LE>()? as usize;
    let sample_count = r.read_u64::<LE>()? as usize;
    let n = n_r * n_t * n_c;
    let read = |r: &mut BufReader<File>| -> Result<Complex64> { Ok(Complex64::new(r.read_f64::<LE>()?, r.read_f64::<LE>()?)) };
    let mean = (0..n).map(|_| read(&mut r)).collect::<Result<Vec<_>>>()?;
    let flat = (0..n * n).map(|_| read(&mut r)).collect::<Result<Vec<_>>>()?;
    Ok(ChannelCovariance { n_r, n_t, n_c, mean, cov: DMatrix::from_vec(n, n, flat), sample_count })
}
