// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal numeric core: tensors, reverse-mode differentiation, layer
//! primitives and the RAdam optimizer.

pub mod functional;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use graph::{BatchStats, Gradients, Graph, Var};
pub use optim::{RAdam, RAdamConfig};
pub use rng::{SeedStreams, Stream};
pub use tensor::{Real, Tensor};
