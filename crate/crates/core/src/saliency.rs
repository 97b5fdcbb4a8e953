// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention saliency: the mean attention each timestep receives across
//! all query positions of one head,
//!
//! ```text
//! S_t = (1/T) Σ_i A[i, t]
//! ```
//!
//! Saliency is observational. A salient timestep is a candidate for
//! patching, not evidence that the model depends on it.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ActivationCache;
use crate::nn::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyProfile {
    pub layer: usize,
    pub head: usize,
    pub scores: Vec<f32>,
}

impl SaliencyProfile {
    pub fn total(&self) -> f64 {
        self.scores.iter().map(|&s| s as f64).sum()
    }
}

/// Column means of the cached attention matrix of head `(layer, head)`.
pub fn attention_saliency(cache: &ActivationCache<f32>, layer: usize, head: usize) -> Result<SaliencyProfile> {
    let a = cache.attention(layer, head)?;
    let (rows, cols) = (a.rows(), a.cols());
    if rows == 0 {
        return Err(Error::InvalidArgument("empty attention matrix".into()));
    }
    let mut sums = vec![0.0f64; cols];
    for i in 0..rows {
        for (s, &v) in sums.iter_mut().zip(a.row(i)) {
            *s += v as f64;
        }
    }
    Ok(SaliencyProfile {
        layer,
        head,
        scores: sums.into_iter().map(|s| (s / rows as f64) as f32).collect(),
    })
}

/// Profiles for every head, layer-major.
pub fn all_saliency(cache: &ActivationCache<f32>) -> Result<Vec<SaliencyProfile>> {
    let cfg = &cache.config;
    let mut out = Vec::with_capacity(cfg.layers * cfg.heads);
    for l in 0..cfg.layers {
        for h in 0..cfg.heads {
            out.push(attention_saliency(cache, l, h)?);
        }
    }
    Ok(out)
}

/// CSV with one row per timestep: `t, ch0 … ch{C-1}, saliency`.
/// `values` is the `C×T` model input.
pub fn overlay_csv(profile: &SaliencyProfile, values: &Tensor<f32>) -> Result<String> {
    let (c, t) = (values.rows(), values.cols());
    if t != profile.scores.len() {
        return Err(Error::Shape {
            op: "saliency overlay",
            expected: vec![c, profile.scores.len()],
            actual: values.shape().to_vec(),
        });
    }
    let mut out = String::from("t");
    for ch in 0..c {
        write!(out, ",ch{ch}").unwrap();
    }
    out.push_str(",saliency\n");
    for (ti, s) in profile.scores.iter().enumerate() {
        write!(out, "{ti}").unwrap();
        for ch in 0..c {
            write!(out, ",{}", values.at(ch, ti)).unwrap();
        }
        writeln!(out, ",{s}").unwrap();
    }
    Ok(out)
}
