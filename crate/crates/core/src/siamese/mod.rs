//! The encoder head: an MLP with ReLU hidden layers and a linear output,
//! applied with shared weights to the anchor, positive and negative of each
//! triplet, and trained by SGD on the triplet loss
//! `max(‖f(a)−f(p)‖² − ‖f(a)−f(n)‖² + margin, 0)`.
//!
//! Parameters are stored as `f32`; every dot product, activation cache and
//! gradient is carried in `f64`.

mod loss;
mod model;
mod sampling;
mod train;

pub use loss::{backward, squared_distance, triplet_loss, triplet_loss_grad, OutputGrads};
pub use model::{
    forward, init_model, Activation, Checkpoint, CheckpointError, Gradients, Layer, LayerGrad,
    ModelError, ShapeError, SiameseModel,
};
pub use sampling::{sample_triplets, SampleError, Triplet};
pub use train::{fit, train, ConfigError, TrainConfig, TrainError, TrainLog};
