//! Structure-feature attention graph convolution (SFAGC) for point clouds.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`tape`], [`params`], [`checkpoint`]: dense `f64` tensors,
//!   reverse-mode autodiff, Adam and the finite-difference oracle.
//! * [`graph`]: k-NN graphs, farthest point sampling, top-k ranking, ball query.
//! * [`structure`]: feature angle/distance, relational embedding and the
//!   local structure projection aggregation.
//! * [`layer`]: the SFAGC convolution itself.
//! * [`pooling`]: score- and FPS-based graph pooling, feature propagation,
//!   multi-scale set abstraction.
//! * [`models`]: classification and segmentation networks, losses, metrics.
//! * [`io`] and [`commands`]: point formats, mesh sampling, synthetic data,
//!   configuration and the train/eval/gradcheck drivers behind the CLI.

pub mod checkpoint;
pub mod commands;
pub mod error;
pub mod graph;
pub mod io;
pub mod layer;
pub mod models;
pub mod nn;
pub mod params;
pub mod pooling;
pub mod structure;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{KnnGraph, PointSet};
pub use tensor::Tensor;
