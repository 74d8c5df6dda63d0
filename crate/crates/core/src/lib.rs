//! Weighted kernel density routing for capsule networks.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`io`]: dense row-major tensors and their binary format
//! - [`kernels`]: kernel profiles and distance metrics
//! - [`routing`]: the routing algorithms and capsule activation
//! - [`autograd`]: a tensor-level reverse-mode tape and finite-difference checking
//! - [`network`]: the hybrid convolution/capsule architecture and its CNN baseline
//! - [`data`]: IDX loading, preprocessing, augmentation and a synthetic glyph dataset
//! - [`training`]: losses, the margin schedule, the training loop and evaluation
//! - [`config`]: the versioned TOML configuration

pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod io;
pub mod kernels;
pub mod network;
pub mod routing;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use autograd::{Gradients, Tape, Var};
pub use config::Config;
pub use data::{Dataset, Split};
pub use error::{Error, Result};
pub use kernels::{KernelSpec, Metric, Profile};
pub use network::{LayerSpec, LossKind, NetworkSpec, Parameters};
pub use routing::{
    ActivationParams, CapsuleGrid, Normalization, RoutingConfig, RoutingMethod, RoutingState,
    VoteTensor,
};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};
pub use training::{TrainConfig, TrainReport};
