//! A small reverse-mode differentiable tensor engine.
//!
//! Graphs are single-owner tapes ([`Graph`]) that read trainable tensors from
//! an immutable [`ParamStore`]; `backward` returns owned [`Gradients`] that an
//! optimizer applies after the graph is dropped. Training runs in `f32`,
//! finite-difference verification in `f64`.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Conv2dGeometry, Gradients, Graph, Var};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use params::{Builder, ParamId, ParamStore};
pub use scalar::Real;
pub use tensor::Tensor;
