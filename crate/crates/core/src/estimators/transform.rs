//! Unitary angle-delay transform with a real/imaginary split.

use std::sync::Arc;

use autodiff::Tensor;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulator::ChannelTensor;

/// Which two axes the 2D transform acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformAxes {
    /// DFT over transmit antennas, inverse DFT over subcarriers, per receive antenna.
    #[default]
    TxSubcarrier,
    /// DFT over receive and transmit antennas, per subcarrier.
    RxTx,
}

/// Reusable FFT plans for one channel geometry.
pub struct AngleDelay {
    pub n_r: usize,
    pub n_t: usize,
    pub n_c: usize,
    pub axes: TransformAxes,
    fwd_r: Arc<dyn Fft<f64>>,
    inv_r: Arc<dyn Fft<f64>>,
    fwd_t: Arc<dyn Fft<f64>>,
    inv_t: Arc<dyn Fft<f64>>,
    fwd_c: Arc<dyn Fft<f64>>,
    inv_c: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for AngleDelay {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AngleDelay")
            .field("n_r", &self.n_r)
            .field("n_t", &self.n_t)
            .field("n_c", &self.n_c)
            .field("axes", &self.axes)
            .finish()
    }
}

fn apply(fft: &dyn Fft<f64>, buf: &mut [Complex64], scale: f64) {
    fft.process(buf);
    for z in buf.iter_mut() {
        *z *= scale;
    }
}

impl AngleDelay {
    pub fn new(n_r: usize, n_t: usize, n_c: usize, axes: TransformAxes) -> Self {
        let mut p = FftPlanner::new();
        Self {
            n_r,
            n_t,
            n_c,
            axes,
            fwd_r: p.plan_fft_forward(n_r),
            inv_r: p.plan_fft_inverse(n_r),
            fwd_t: p.plan_fft_forward(n_t),
            inv_t: p.plan_fft_inverse(n_t),
            fwd_c: p.plan_fft_forward(n_c),
            inv_c: p.plan_fft_inverse(n_c),
        }
    }

    fn check(&self, dims: (usize, usize, usize)) -> Result<()> {
        if dims != (self.n_r, self.n_t, self.n_c) {
            return Err(Error::Shape(format!("transform planned for {:?}, got {:?}", (self.n_r, self.n_t, self.n_c), dims)));
        }
        Ok(())
    }

    /// Transform along one axis of a `(n_r, n_t, n_c)` complex array stored
    /// subcarrier-fastest.
    fn along(&self, data: &mut [Complex64], axis: usize, fft: &dyn Fft<f64>) {
        let dims = [self.n_r, self.n_t, self.n_c];
        let strides = [self.n_t * self.n_c, self.n_c, 1];
        let n = dims[axis];
        let scale = 1.0 / (n as f64).sqrt();
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..dims[others[0]] {
            for j in 0..dims[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                for (m, b) in buf.iter_mut().enumerate() {
                    *b = data[base + m * strides[axis]];
                }
                apply(fft, &mut buf, scale);
                for (m, b) in buf.iter().enumerate() {
                    data[base + m * strides[axis]] = *b;
                }
            }
        }
    }

    /// Complex angle-delay coefficients (same layout as the channel).
    pub fn forward_complex(&self, h: &ChannelTensor) -> Result<Vec<Complex64>> {
        self.check(h.dims())?;
        let mut d = h.data.clone();
        match self.axes {
            TransformAxes::TxSubcarrier => {
                self.along(&mut d, 1, self.fwd_t.as_ref());
                self.along(&mut d, 2, self.inv_c.as_ref());
            }
            TransformAxes::RxTx => {
                self.along(&mut d, 0, self.fwd_r.as_ref());
                self.along(&mut d, 1, self.fwd_t.as_ref());
            }
        }
        Ok(d)
    }

    pub fn inverse_complex(&self, mut d: Vec<Complex64>, delta_f: f64) -> Result<ChannelTensor> {
        if d.len() != self.n_r * self.n_t * self.n_c {
            return Err(Error::Shape(format!("{} coefficients for {:?}", d.len(), (self.n_r, self.n_t, self.n_c))));
        }
        match self.axes {
            TransformAxes::TxSubcarrier => {
                self.along(&mut d, 2, self.fwd_c.as_ref());
                self.along(&mut d, 1, self.inv_t.as_ref());
            }
            TransformAxes::RxTx => {
                self.along(&mut d, 1, self.inv_t.as_ref());
                self.along(&mut d, 0, self.inv_r.as_ref());
            }
        }
        Ok(ChannelTensor { data: d, n_r: self.n_r, n_t: self.n_t, n_c: self.n_c, delta_f })
    }

    /// Real tensor `(n_r, n_t, 2 n_c)`: real parts in `0..n_c`, imaginary
    /// parts in `n_c..2 n_c`.
    pub fn forward(&self, h: &ChannelTensor) -> Result<Tensor<f64>> {
        let d = self.forward_complex(h)?;
        let n_c = self.n_c;
        let mut out = vec![0.0; d.len() * 2];
        for (row, chunk) in d.chunks(n_c).enumerate() {
            let base = row * 2 * n_c;
            for (k, z) in chunk.iter().enumerate() {
                out[base + k] = z.re;
                out[base + n_c + k] = z.im;
            }
        }
        Ok(Tensor::new(&[self.n_r, self.n_t, 2 * n_c], out)?)
    }

    pub fn inverse(&self, c: &Tensor<f64>, delta_f: f64) -> Result<ChannelTensor> {
        if c.shape() != [self.n_r, self.n_t, 2 * self.n_c] {
            return Err(Error::Shape(format!("angle-delay tensor {:?}", c.shape())));
        }
        let n_c = self.n_c;
        let d = c
            .data()
            .chunks(2 * n_c)
            .flat_map(|row| (0..n_c).map(move |k| Complex64::new(row[k], row[n_c + k])))
            .collect();
        self.inverse_complex(d, delta_f)
    }
}

pub fn to_angle_delay(h: &ChannelTensor) -> Result<Tensor<f64>> {
    AngleDelay::new(h.n_r, h.n_t, h.n_c, TransformAxes::default()).forward(h)
}

pub fn from_angle_delay(c: &Tensor<f64>, delta_f: f64) -> Result<ChannelTensor> {
    let s = c.shape();
    if s.len() != 3 || s[2] % 2 != 0 {
        return Err(Error::Shape(format!("angle-delay tensor {:?}", s)));
    }
    AngleDelay::new(s[0], s[1], s[2] / 2, TransformAxes::default()).inverse(c, delta_f)
}
