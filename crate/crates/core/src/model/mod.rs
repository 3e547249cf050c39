//! Network, losses, optimization and retrieval evaluation.

pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod network;
pub mod optim;
pub mod retrieval;
pub mod schedule;
pub mod train;

pub use loss::{LossConfig, LossKind};
pub use network::{Embedding, ForwardCache, Mode, Model, ModelConfig, ModelGrads};
pub use optim::AdamW;
pub use retrieval::{evaluate_retrieval, Direction, RetrievalResult};
pub use schedule::TrainSchedule;
pub use train::{train, EpochMetrics, TrainConfig, Trainer};
