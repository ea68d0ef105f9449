//! Null-space networks and learned M-regularization for finite-dimensional
//! linear inverse problems.

pub mod error;
pub mod filters;
pub mod harness;
pub mod linop;
pub mod network;
pub mod regpipeline;
pub mod training;

pub use error::{Error, Result};
pub use filters::{FilterFamily, FilterSpec};
pub use linop::DenseOperator;
pub use network::{Activation, FeedForwardNet, NullSpaceNetwork, ProjectorMode};
pub use regpipeline::{MRegularizer, ParamChoice};
pub use training::{TrainConfig, TrainMode, TrainingSet};
