//! Perception encoder, DiT and the learned null condition in one parameter
//! store.

use autodiff::{Builder, Graph, ParamId, ParamStore, Real, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dit::{Dit, DitConfig};
use crate::error::{Error, Result};
use crate::perception::{Perception, PerceptionConfig, PerceptionInputs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_r: usize,
    pub n_t: usize,
    pub n_c: usize,
    pub dit: DitConfig,
    pub perception: PerceptionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { n_r: 4, n_t: 4, n_c: 64, dit: DitConfig::toy(), perception: PerceptionConfig::default() }
    }
}

impl ModelConfig {
    /// Real-valued angle-delay tensor shape `(N_r, N_t, 2 N_c)`.
    pub fn dims(&self) -> [usize; 3] {
        [self.n_r, self.n_t, 2 * self.n_c]
    }

    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dit.heads == 0 || self.dit.dim % self.dit.heads != 0 {
            return Err(Error::Config(format!("dim {} not divisible by {} heads", self.dit.dim, self.dit.heads)));
        }
        self.perception.validate()
    }
}

/// Modalities replaced by their slice of `C_∅`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModalityMask {
    pub lidar: bool,
    pub camera: bool,
    pub position: bool,
}

impl ModalityMask {
    pub const NONE: Self = Self { lidar: false, camera: false, position: false };
    pub const ALL: Self = Self { lidar: true, camera: true, position: true };

    pub fn parse(s: &str) -> Result<Self> {
        let mut m = Self::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "none" => {}
                "lidar" => m.lidar = true,
                "camera" => m.camera = true,
                "position" => m.position = true,
                "all" => m = Self::ALL,
                other => return Err(Error::Config(format!("unknown modality '{other}'"))),
            }
        }
        Ok(m)
    }

    /// Label of the conditions left active.
    pub fn label(&self) -> String {
        let kept: Vec<&str> = [(!self.lidar, "lidar"), (!self.camera, "camera"), (!self.position, "location")]
            .into_iter()
            .filter_map(|(k, n)| k.then_some(n))
            .collect();
        match kept.len() {
            0 => "pilots".into(),
            3 => "full".into(),
            _ => format!("pilots+{}", kept.join("+")),
        }
    }

    fn flags(&self) -> [bool; 3] {
        [self.lidar, self.camera, self.position]
    }
}

#[derive(Debug, Clone)]
pub struct FlowModel {
    pub cfg: ModelConfig,
    pub perception: Perception,
    pub dit: Dit,
    pub null_env: ParamId,
}

impl FlowModel {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dit.dim;
        let env_len = cfg.perception.env_len();
        let perception = Perception::new(&mut b.sub("perception"), &cfg.perception, d, cfg.dit.heads)?;
        let dit = Dit::new(&mut b.sub("dit"), &cfg.dit, cfg.dims(), env_len)?;
        let null_env = b.normal("null_env", &[env_len, d], 0.02)?;
        Ok(Self { cfg: cfg.clone(), perception, dit, null_env })
    }

    /// Fresh parameters from a seed.
    pub fn init<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<(ParamStore<T>, Self)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::new(&mut Builder::new(&mut store, &mut rng), cfg)?;
        Ok((store, model))
    }

    pub fn environment<T: Real>(&self, g: &mut Graph<'_, T>, inputs: &PerceptionInputs) -> Result<Var> {
        self.perception.forward(g, inputs)
    }

    pub fn null_environment<T: Real>(&self, g: &mut Graph<'_, T>) -> Var {
        g.param(self.null_env)
    }

    /// `env` with the masked modalities' rows taken from `C_∅`.
    pub fn masked<T: Real>(&self, g: &mut Graph<'_, T>, env: Var, mask: ModalityMask) -> Result<Var> {
        let flags = mask.flags();
        if !flags.iter().any(|&f| f) {
            return Ok(env);
        }
        let null = self.null_environment(g);
        if flags.iter().all(|&f| f) {
            return Ok(null);
        }
        let mut parts = Vec::with_capacity(3);
        for (range, drop) in self.cfg.perception.modality_ranges().into_iter().zip(flags) {
            let src = if drop { null } else { env };
            parts.push(g.slice_rows(src, range.start, range.len())?);
        }
        Ok(g.concat_rows(&parts)?)
    }

    /// Patch-token velocity, see [`Dit::forward`].
    pub fn velocity<T: Real>(&self, g: &mut Graph<'_, T>, ht: Var, pilot: Var, ts: &[f64], contexts: &[Var]) -> Result<Var> {
        self.dit.forward(g, ht, pilot, ts, contexts)
    }
}
