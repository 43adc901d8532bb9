//! Minimal deterministic tensor library: reverse-mode autodiff, the layers
//! used by the three networks, losses, Adam and a binary checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::{Checkpoint, Payload, CHECKPOINT_MAGIC, RASTER_MAGIC};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{sigmoid, Graph, Var};
pub use layers::{BatchNorm, Conv2d, Dense, DropoutConfig, Phase};
pub use loss::LossConfig;
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
