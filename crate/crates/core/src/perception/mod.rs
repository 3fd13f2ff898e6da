//! Environment perception: sensor stand-ins, modality branches and fusion.

pub mod network;
pub mod sensors;

pub use network::{position_features, Perception, PerceptionConfig, PerceptionInputs, Resampler};
pub use sensors::{rasterize_bev, render_views, BevMap, Image, SensorConfig};
