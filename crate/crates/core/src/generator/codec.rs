//! Conversion between frequency-domain channels and normalized
//! angle-delay patch tokens.

use super::checkpoint::Normalization;
use super::patch::PatchSpec;
use crate::error::{Error, Result};
use crate::estimators::{ls_interpolated, AngleDelay, TransformAxes};
use crate::simulator::{ChannelTensor, Dataset, PilotObservation};

#[derive(Debug)]
pub struct ChannelCodec {
    pub transform: AngleDelay,
    pub spec: PatchSpec,
    pub norm: Normalization,
    pub delta_f: f64,
}

impl ChannelCodec {
    pub fn new(n_r: usize, n_t: usize, n_c: usize, delta_f: f64, patch: [usize; 3], norm: Normalization) -> Result<Self> {
        if !(norm.scale > 0.0) {
            return Err(Error::Config(format!("normalization scale {} must be positive", norm.scale)));
        }
        Ok(Self {
            transform: AngleDelay::new(n_r, n_t, n_c, TransformAxes::default()),
            spec: PatchSpec::new([n_r, n_t, 2 * n_c], patch)?,
            norm,
            delta_f,
        })
    }

    /// Normalized patch tokens of a channel, flattened `[L_patch * P]`.
    pub fn encode(&self, h: &ChannelTensor) -> Result<Vec<f64>> {
        let ad = self.transform.forward(h)?;
        let inv = 1.0 / self.norm.scale;
        let scaled: Vec<f64> = ad.data().iter().map(|x| x * inv).collect();
        self.spec.patchify(&scaled)
    }

    pub fn decode(&self, tokens: &[f64]) -> Result<ChannelTensor> {
        let dense: Vec<f64> = self.spec.unpatchify(tokens)?.into_iter().map(|x| x * self.norm.scale).collect();
        let t = autodiff::Tensor::new(&self.spec.dims, dense)?;
        self.transform.inverse(&t, self.delta_f)
    }

    /// Tokens of the interpolated LS estimate, the pilot condition.
    pub fn pilot_tokens(&self, obs: &PilotObservation) -> Result<Vec<f64>> {
        self.encode(&ls_interpolated(obs, self.delta_f)?)
    }
}

/// RMS of the angle-delay elements and mean channel power over a dataset.
pub fn dataset_normalization(ds: &Dataset) -> Result<Normalization> {
    if ds.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let transform = AngleDelay::new(ds.n_r, ds.n_t, ds.n_c, TransformAxes::default());
    let mut sum = 0.0;
    let mut count = 0usize;
    for h in &ds.channels {
        let ad = transform.forward(h)?;
        sum += ad.data().iter().map(|x| x * x).sum::<f64>();
        count += ad.numel();
    }
    let scale = (sum / count as f64).sqrt();
    if !(scale > 0.0) {
        return Err(Error::ZeroNorm("dataset channels are all zero".into()));
    }
    Ok(Normalization { scale, signal_power: ds.signal_power() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    #[test]
    fn encode_decode_round_trip() {
        let norm = Normalization { scale: 0.37, signal_power: 1.0 };
        let codec = ChannelCodec::new(4, 4, 16, 120e3, [2, 2, 8], norm).unwrap();
        let h = ChannelTensor::from_fn(4, 4, 16, 120e3, |r, t, k| Complex64::new((r + 2 * t) as f64 * 0.1, (k as f64 * 0.3).sin()));
        let back = codec.decode(&codec.encode(&h).unwrap()).unwrap();
        for (a, b) in back.data.iter().zip(&h.data) {
            assert!((a - b).norm() < 1e-12);
        }
    }
}
