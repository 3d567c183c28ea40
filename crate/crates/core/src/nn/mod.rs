//! Neural-network engine: layers, optimizers, and the training loop.

pub mod layers;
pub mod network;
pub mod optim;
pub mod spec;
pub mod train;

pub use network::{Backend, BackendKind, Layer, Network, Trainable};
pub use optim::{OptState, OptimizerSpec};
pub use spec::{ActivationKind, LayerSpec, NetworkSpec, Shape};
pub use train::{evaluate, infer, retrain, train, EpochRecord, LossReduction, RunRecord, TrainConfig};
