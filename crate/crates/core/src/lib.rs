//! Continual semi-supervised learning with soft nearest-neighbor
//! pseudo-labels, nearest-neighbor distillation and a replay buffer.

pub mod data;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod snn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use metrics::{MetricSummary, ResultMatrix};
pub use tensor::{Graph, Tensor, Var};
pub use trainer::{run_stream, Learner, Method, TrainConfig};
