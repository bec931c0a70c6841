//! Compact hierarchical segmentation network and its training loop.

mod checkpoint;
mod gradcheck;
pub mod layers;
mod model;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{gradcheck, relative_error, GradCheckReport, GradLoss};
pub use model::{BranchTrace, ForwardOutput, Grads, Image, NetworkConfig, PairOptions, PairOutput, SegNet, HEAD_LAYER};
pub use train::{
    apply_update, evaluate, poly_factor, sample_step, train, Conventions, SampleStep, StepRecord, TrainConfig,
    TrainSummary,
};
