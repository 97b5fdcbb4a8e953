// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mechanistic interpretability workbench for a time-series transformer.

pub mod causal_graph;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod model;
pub mod nn;
pub mod patching;
pub mod report;
pub mod sae;
pub mod saliency;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{ActivationCache, ForwardMode, ModelConfig, TapPoint, TstModel};
pub use nn::Tensor;
