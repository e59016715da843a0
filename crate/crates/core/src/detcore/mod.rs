//! Two-stage detector, loss composition and the training loop.

pub mod checkpoint;
pub mod losses;
pub mod model;
pub mod proposals;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use losses::{det_losses, total_loss, CameraMode, LossBundle, LossParts};
pub use model::{Detection, Detector, ModelConfig};
pub use proposals::{propose_regions, ProposalSet};
pub use train::{train_in_memory, train_to_dir, MetricsRow, Mode, Regularizers, StepOutput, TrainConfig, Trainer};
