// SPDX-License-Identifier: MIT OR Apache-2.0

//! Stateless tensor functions with the conventional layouts
//! (`C×T` sequences, `B×C×T` batches). Each one evaluates the same tape
//! operation the model uses, without keeping the tape.

use rand::Rng;

use super::graph::{Graph, BATCH_NORM_EPS};
use super::tensor::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

pub fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let (va, vb) = (g.leaf(a.clone()), g.leaf(b.clone()));
    let out = g.matmul(va, vb)?;
    Ok(g.value(out).clone())
}

/// `x·w + b`, `x: [m×in]`, `w: [in×out]`, `b: [out]`.
pub fn linear<F: Real>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let (vx, vw, vb) = (g.leaf(x.clone()), g.leaf(w.clone()), g.leaf(b.clone()));
    let out = g.linear(vx, vw, vb)?;
    Ok(g.value(out).clone())
}

/// 1-D cross-correlation of `x: [c_in×T]` with `w: [c_out×c_in×k]`.
/// Only "same" padding (`padding = ⌊k/2⌋`, odd `k`) is supported, so the
/// output is `[c_out×T]`.
pub fn conv1d<F: Real>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>, padding: usize) -> Result<Tensor<F>> {
    let [c_in, t] = *x.shape() else {
        return Err(Error::InvalidArgument(format!("conv1d: input must be C×T, got {:?}", x.shape())));
    };
    let k = w.shape().get(2).copied().unwrap_or(0);
    if k > t + 2 * padding {
        return Err(Error::InvalidArgument(format!(
            "conv1d: kernel {k} wider than padded input {}",
            t + 2 * padding
        )));
    }
    if k % 2 == 0 || padding != k / 2 {
        return Err(Error::InvalidArgument(format!(
            "conv1d: padding {padding} does not preserve length for kernel {k}"
        )));
    }
    if w.shape().get(1) != Some(&c_in) {
        return Err(shape_err("conv1d", &[w.shape()[0], c_in, k], w.shape()));
    }
    let mut g = Graph::new();
    let vx = g.leaf(x.transpose()?);
    let (vw, vb) = (g.leaf(w.clone()), g.leaf(b.clone()));
    let out = g.conv1d(vx, vw, vb, t)?;
    g.value(out).transpose()
}

/// Running statistics and affine parameters of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<F = f32> {
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    pub gamma: Vec<F>,
    pub beta: Vec<F>,
    pub momentum: f64,
}

impl<F: Real> BatchNormState<F> {
    /// Fresh layer: mean 0, variance 1, γ = 1, β = 0, momentum 0.1.
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![F::zero(); channels],
            running_var: vec![F::one(); channels],
            gamma: vec![F::one(); channels],
            beta: vec![F::zero(); channels],
            momentum: 0.1,
        }
    }

    /// Folds batch statistics into the running estimates. `var` is the
    /// biased batch variance; the running estimate uses the unbiased one.
    pub fn update(&mut self, mean: &[F], var: &[F], count: usize) {
        let mom = F::lit(self.momentum);
        let one = F::one();
        let unbias = if count > 1 {
            F::from_usize(count).unwrap() / F::from_usize(count - 1).unwrap()
        } else {
            one
        };
        for c in 0..self.running_mean.len() {
            self.running_mean[c] = (one - mom) * self.running_mean[c] + mom * mean[c];
            self.running_var[c] = (one - mom) * self.running_var[c] + mom * var[c] * unbias;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Batch norm over `x: [B×C×T]`, per channel across batch and time.
pub fn batchnorm1d<F: Real>(x: &Tensor<F>, state: &mut BatchNormState<F>, mode: NormMode) -> Result<Tensor<F>> {
    let [b, c, t] = *x.shape() else {
        return Err(Error::InvalidArgument(format!("batchnorm1d: input must be B×C×T, got {:?}", x.shape())));
    };
    if c != state.gamma.len() {
        return Err(shape_err("batchnorm1d", &[state.gamma.len()], &[c]));
    }
    // to rows = (b, t), cols = channel
    let mut rows = vec![F::zero(); b * c * t];
    for bi in 0..b {
        for ci in 0..c {
            for ti in 0..t {
                rows[(bi * t + ti) * c + ci] = x.data()[(bi * c + ci) * t + ti];
            }
        }
    }
    let mut g = Graph::new();
    let vx = g.leaf(Tensor::new(&[b * t, c], rows)?);
    let vg = g.leaf(Tensor::new(&[c], state.gamma.clone())?);
    let vb = g.leaf(Tensor::new(&[c], state.beta.clone())?);
    let out = match mode {
        NormMode::Train => {
            let (out, stats) = g.batch_norm_train(vx, vg, vb)?;
            state.update(&stats.mean, &stats.var, stats.count);
            out
        }
        NormMode::Eval => g.batch_norm_eval(vx, vg, vb, &state.running_mean, &state.running_var)?,
    };
    let y = g.value(out).data();
    let mut data = vec![F::zero(); b * c * t];
    for bi in 0..b {
        for ci in 0..c {
            for ti in 0..t {
                data[(bi * c + ci) * t + ti] = y[(bi * t + ti) * c + ci];
            }
        }
    }
    Tensor::new(&[b, c, t], data)
}

/// Epsilon used by [`batchnorm1d`].
pub const BATCHNORM_EPS: f64 = BATCH_NORM_EPS;

pub fn layer_norm<F: Real>(x: &Tensor<F>, gamma: &[F], beta: &[F]) -> Result<Tensor<F>> {
    let n = x.cols();
    let mut g = Graph::new();
    let vx = g.leaf(x.clone());
    let vg = g.leaf(Tensor::new(&[n], gamma.to_vec())?);
    let vb = g.leaf(Tensor::new(&[n], beta.to_vec())?);
    let out = g.layer_norm(vx, vg, vb)?;
    Ok(g.value(out).clone())
}

/// Softmax along the last axis.
pub fn softmax<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let mut g = Graph::new();
    let vx = g.leaf(x.clone());
    let out = g.softmax(vx);
    g.value(out).clone()
}

pub fn cross_entropy<F: Real>(logits: &Tensor<F>, labels: &[usize]) -> Result<F> {
    let mut g = Graph::new();
    let vx = g.leaf(logits.clone());
    let out = g.cross_entropy(vx, labels)?;
    Ok(g.value(out).data()[0])
}

pub fn relu<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let mut g = Graph::new();
    let vx = g.leaf(x.clone());
    let out = g.relu(vx);
    g.value(out).clone()
}

/// Inverted-dropout mask: each element is 0 with probability `p`, otherwise
/// `1/(1-p)`.
pub fn dropout_mask<F: Real, R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<F> {
    let keep = F::lit(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
        .collect()
}

/// Dropout; the exact identity when `train` is false or `p` is zero.
pub fn dropout<F: Real, R: Rng + ?Sized>(x: &Tensor<F>, p: f64, train: bool, rng: &mut R) -> Result<Tensor<F>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("dropout probability {p} not in [0, 1)")));
    }
    if !train || p == 0.0 {
        return Ok(x.clone());
    }
    let mut g = Graph::new();
    let vx = g.leaf(x.clone());
    let out = g.mask_scale(vx, dropout_mask(x.len(), p, rng))?;
    Ok(g.value(out).clone())
}

/// Max over time of `x: [T×d]`, giving `[d]`.
pub fn max_pool_over_time<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let t = x.rows();
    let mut g = Graph::new();
    let vx = g.leaf(x.clone().reshape(&[t, x.cols()])?);
    let out = g.max_pool_time(vx, t)?;
    g.value(out).clone().reshape(&[x.cols()])
}
