//! MCFW checkpoint files: a TOML metadata block followed by named `f32`
//! tensors in parameter-store order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use autodiff::{ParamStore, Tensor};
use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::model::{FlowModel, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MCFW";
const VERSION: u32 = 1;

/// Dataset scaling the model was trained under.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// RMS of training angle-delay elements; network tensors are divided by it.
    pub scale: f64,
    /// Mean `|H|^2` of the training channels, the SNR reference.
    pub signal_power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub norm: Normalization,
    pub step: u64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    /// Rebuild the model skeleton and check every tensor name and shape.
    pub fn model(&self) -> Result<FlowModel> {
        let (fresh, model) = FlowModel::init::<f32>(&self.meta.model, 0)?;
        if fresh.len() != self.params.len() {
            return Err(Error::Checkpoint(format!("{} tensors stored, model has {}", self.params.len(), fresh.len())));
        }
        for ((_, a, ta), (_, b, tb)) in fresh.iter().zip(self.params.iter()) {
            if a != b || ta.shape() != tb.shape() {
                return Err(Error::Checkpoint(format!("expected {a} {:?}, found {b} {:?}", ta.shape(), tb.shape())));
            }
        }
        Ok(model)
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let meta = toml::to_string(&ckpt.meta).map_err(|e| Error::Format(e.to_string()))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    w.write_u32::<LE>(meta.len() as u32)?;
    w.write_all(meta.as_bytes())?;
    w.write_u32::<LE>(ckpt.params.len() as u32)?;
    for (_, name, t) in ckpt.params.iter() {
        w.write_u32::<LE>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LE>(t.shape().len() as u32)?;
        for &d in t.shape() {
            w.write_u32::<LE>(d as u32)?;
        }
        for &x in t.data() {
            w.write_f32::<LE>(x)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an MCFW checkpoint".into()));
    }
    let version = r.read_u32::<LE>()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta = read_string(&mut r)?;
    let meta: CheckpointMeta = toml::from_str(&meta)?;
    let count = r.read_u32::<LE>()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = read_string(&mut r)?;
        let ndim = r.read_u32::<LE>()? as usize;
        let shape = (0..ndim).map(|_| Ok(r.read_u32::<LE>()? as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = vec![0f32; n];
        r.read_f32_into::<LE>(&mut data)?;
        params.insert(name, Tensor::new(&shape, data)?)?;
    }
    let ckpt = Checkpoint { meta, params };
    ckpt.model()?;
    Ok(ckpt)
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = r.read_u32::<LE>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::DitConfig;

    fn small() -> ModelConfig {
        ModelConfig { n_c: 8, dit: DitConfig { dim: 8, depth: 1, heads: 2, patch: [2, 2, 4], mlp_ratio: 2, freq_dim: 8 }, ..Default::default() }
    }

    #[test]
    fn round_trip_is_exact() {
        let (params, _) = FlowModel::init::<f32>(&small(), 9).unwrap();
        let meta = CheckpointMeta { model: small(), norm: Normalization { scale: 0.125, signal_power: 3.5 }, step: 7, seed: 9 };
        let ckpt = Checkpoint { meta, params };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mcfw");
        write_checkpoint(&p, &ckpt).unwrap();
        let back = read_checkpoint(&p).unwrap();
        assert_eq!(back.meta, ckpt.meta);
        for ((_, a, x), (_, b, y)) in back.params.iter().zip(ckpt.params.iter()) {
            assert_eq!(a, b);
            assert_eq!(x, y);
        }
    }

    #[test]
    fn mismatched_config_rejected() {
        let (params, _) = FlowModel::init::<f32>(&small(), 9).unwrap();
        let mut model = small();
        model.dit.depth = 2;
        let ckpt = Checkpoint { meta: CheckpointMeta { model, norm: Normalization { scale: 1.0, signal_power: 1.0 }, step: 0, seed: 0 }, params };
        assert!(matches!(ckpt.model(), Err(Error::Checkpoint(_))));
    }
}
