//! Minimal convolutional network used as the ensemble's base learner and as
//! the Grad-CAM host.

pub mod arch;
pub mod checkpoint;
pub mod layer;
pub mod net;
pub mod tensor;
pub mod train;

pub use layer::{LayerKind, LayerSpec};
pub use net::{ForwardCache, GradientSet, Layer, MicroNet, ParamGrad};
pub use tensor::Tensor;
pub use train::{predict, to_batch, train_two_phase, EpochRecord, Phase, TrainOptions};
