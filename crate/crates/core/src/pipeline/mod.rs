//! Retrieval, sequence assembly, the toy network, absolute-pose recovery,
//! losses and training.

pub mod assemble;
pub mod loss;
pub mod model;
pub mod recover;
pub mod retrieval;
pub mod train;

pub use assemble::{assemble, AssembledSequence, FrameToken, Placement, SequenceFrame, TokenMode};
pub use loss::{pose_loss, rotation_loss};
pub use model::{Model, ModelConfig, SequenceInput};
pub use recover::{pose_candidates, recover_absolute};
pub use retrieval::retrieve_topk;
pub use train::{
    build_samples, median_pose_errors, relocalize_samples, train_toy, Sample, TrainConfig, TrainReport, TrainSchedule,
};
