//! Synthetic V2I scenes, multipath channels and pilot transmission.

pub mod align;
pub mod channel;
pub mod dataset;
pub mod pilots;
pub mod scene;

pub use align::{align_temporal, to_cav_frame, AlignedScene, CHANNELS_PER_SCENE};
pub use channel::{channel_tensor, synthesize_paths, ChannelTensor, Path, PathSet, RfConfig};
pub use dataset::{generate_dataset, read_dataset, write_dataset, Dataset};
pub use pilots::{transmit, Noise, PilotObservation, PilotPattern};
pub use scene::{generate_scene, Material, Point3, ScenarioConfig, ScenarioTag, Scene};
