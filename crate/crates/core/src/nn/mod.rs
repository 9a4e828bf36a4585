//! Small sequential neural-network engine with exact analytic gradients.

mod engine;
mod model;
mod params;
mod train;

pub use engine::{backward, forward, forward_backward, Batch, ForwardPass};
pub use model::{Layer, ModelSpec};
pub use params::{LayerParams, Parameters};
pub use train::{argmax, evaluate, local_train, sgd_step, Evaluation, TrainOutcome, TrainSettings};
