//! Planner and simulator for heterogeneous U-shaped split training of a
//! conditional GAN with clustered, divergence-weighted federated averaging.

pub mod data;
pub mod error;
pub mod federation;
pub mod graph;
pub mod latency;
pub mod metrics;
pub mod optim;
pub mod planner;
pub mod run;
pub mod split;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
