//! Conditional flow-matching generator: patching, the DiT backbone, the
//! training loop, checkpoints and guided sampling.

pub mod checkpoint;
pub mod codec;
pub mod dit;
pub mod flow;
pub mod model;
pub mod patch;
pub mod sample;
pub mod toy;
pub mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointMeta, Normalization};
pub use dit::{Dit, DitConfig};
pub use flow::{cfg_combine, euler, interpolate, FlowState};
pub use model::{FlowModel, ModalityMask, ModelConfig};
pub use patch::PatchSpec;
pub use codec::{dataset_normalization, ChannelCodec};
pub use sample::{FlowEstimator, Guidance, SampleRequest};
pub use train::{train, write_loss_curve, StepLog, TrainConfig, TrainHooks, TrainOutcome};
