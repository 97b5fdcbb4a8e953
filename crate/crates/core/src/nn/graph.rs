// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tape-based reverse-mode differentiation over whole tensors.
//!
//! Every operation appends one node holding its output value and enough
//! saved state to run its backward rule. Nodes are only ever appended, so
//! node order is a topological order and `backward` walks it in reverse.

use super::kernels::{self, AttnDims, ConvDims};
use super::tensor::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, F),
    AddPositional {
        x: Var,
        pos: Var,
        seq_len: usize,
    },
    Relu(Var),
    MaskScale {
        x: Var,
        mask: Vec<F>,
    },
    Overwrite {
        x: Var,
        mask: Vec<bool>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        dims: ConvDims,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    MaxPoolTime {
        x: Var,
        argmax: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        probs: Vec<F>,
    },
    SumSquares(Var),
    AbsSum(Var),
    WeightedSum {
        x: Var,
        weights: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Batch statistics produced by a train-mode batch norm node.
#[derive(Clone, Debug)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Biased variance used for normalization.
    pub var: Vec<F>,
    /// Number of rows the statistics were computed over.
    pub count: usize,
}

/// An append-only tape of tensor operations.
pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Registers an input or parameter.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::InvalidArgument(format!(
                "{op}: expected a 2-D tensor, got shape {s:?}"
            ))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                expected: self.shape(a).to_vec(),
                actual: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![F::zero(); m * n];
        kernels::matmul_acc(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b)))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_bias")?;
        if self.value(b).len() != n {
            return Err(shape_err("add_bias", &[n], self.shape(b)));
        }
        let bias = self.data(b);
        let mut out = self.data(x).to_vec();
        for r in 0..m {
            for (o, &bv) in out[r * n..(r + 1) * n].iter_mut().zip(bias) {
                *o = *o + bv;
            }
        }
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::AddBias(x, b)))
    }

    /// Affine map `x·w + b` with `w` stored as `[in × out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let out = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let t = Tensor::new(&shape, out).expect("same shape");
        self.push(t, Op::Scale(x, c))
    }

    /// Adds a `[T×d]` positional table to each `T`-row block of `x`.
    pub fn add_positional(&mut self, x: Var, pos: Var, seq_len: usize) -> Result<Var> {
        let (rows, d) = self.dims2(x, "add_positional")?;
        if self.shape(pos) != [seq_len, d] || rows % seq_len != 0 {
            return Err(shape_err("add_positional", &[seq_len, d], self.shape(pos)));
        }
        let p = self.data(pos);
        let mut out = self.data(x).to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            let t = (i / d) % seq_len;
            *o = *o + p[t * d + i % d];
        }
        Ok(self.push(Tensor::new(&[rows, d], out)?, Op::AddPositional { x, pos, seq_len }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| v.max(F::zero())).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(&shape, out).expect("same shape"), Op::Relu(x))
    }

    /// Elementwise multiply by a constant mask (used for dropout).
    pub fn mask_scale(&mut self, x: Var, mask: Vec<F>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(shape_err("mask_scale", self.shape(x), &[mask.len()]));
        }
        let out = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::MaskScale { x, mask }))
    }

    /// Replaces the masked elements of `x` with constants from `donor`.
    /// Gradient flows only through the elements that were kept.
    pub fn overwrite(&mut self, x: Var, donor: &[F], mask: Vec<bool>) -> Result<Var> {
        let n = self.value(x).len();
        if donor.len() != n || mask.len() != n {
            return Err(shape_err("overwrite", self.shape(x), &[donor.len()]));
        }
        let out = self
            .data(x)
            .iter()
            .zip(donor)
            .zip(&mask)
            .map(|((&v, &dv), &m)| if m { dv } else { v })
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Overwrite { x, mask }))
    }

    fn affine_check(&self, x: Var, gamma: Var, beta: Var, op: &'static str) -> Result<usize> {
        let n = self.value(x).cols();
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(shape_err(op, &[n], self.shape(gamma)));
        }
        Ok(n)
    }

    /// Normalizes over the last axis, then applies `γ·x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.affine_check(x, gamma, beta, "layer_norm")?;
        let (xhat, inv_std) = kernels::layer_norm_rows(self.data(x), n, F::lit(LAYER_NORM_EPS));
        let out = affine_cols(&xhat, self.data(gamma), self.data(beta), n);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Train-mode batch norm: per-column statistics over all rows.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats<F>)> {
        let n = self.affine_check(x, gamma, beta, "batch_norm")?;
        let rows = self.value(x).rows();
        let (mean, var) = kernels::column_stats(self.data(x), rows, n);
        let eps = F::lit(BATCH_NORM_EPS);
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let xhat = normalize_cols(self.data(x), &mean, &inv_std, n);
        let out = affine_cols(&xhat, self.data(gamma), self.data(beta), n);
        let shape = self.shape(x).to_vec();
        let v = self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((
            v,
            BatchStats {
                mean,
                var,
                count: rows,
            },
        ))
    }

    /// Eval-mode batch norm using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[F],
        running_var: &[F],
    ) -> Result<Var> {
        let n = self.affine_check(x, gamma, beta, "batch_norm")?;
        if running_mean.len() != n || running_var.len() != n {
            return Err(shape_err("batch_norm", &[n], &[running_mean.len()]));
        }
        let eps = F::lit(BATCH_NORM_EPS);
        let inv_std: Vec<F> = running_var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let xhat = normalize_cols(self.data(x), running_mean, &inv_std, n);
        let out = affine_cols(&xhat, self.data(gamma), self.data(beta), n);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// "Same"-padded 1-D convolution over row-layout sequences
    /// `x[(B·T)×c_in]` with weight `[c_out × c_in × k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, seq_len: usize) -> Result<Var> {
        let (rows, c_in) = self.dims2(x, "conv1d")?;
        let [c_out, wc_in, kernel] = *self.shape(w) else {
            return Err(Error::InvalidArgument(format!(
                "conv1d: weight must be 3-D, got {:?}",
                self.shape(w)
            )));
        };
        if wc_in != c_in {
            return Err(shape_err("conv1d", &[c_out, c_in, kernel], self.shape(w)));
        }
        if self.value(b).len() != c_out {
            return Err(shape_err("conv1d bias", &[c_out], self.shape(b)));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::InvalidArgument(format!(
                "conv1d: {rows} rows is not a whole number of length-{seq_len} sequences"
            )));
        }
        let pad = kernel / 2;
        if kernel > seq_len + 2 * pad {
            return Err(Error::InvalidArgument(format!(
                "conv1d: kernel {kernel} wider than padded input {}",
                seq_len + 2 * pad
            )));
        }
        let dims = ConvDims {
            batch: rows / seq_len,
            seq_len,
            c_in,
            c_out,
            kernel,
            pad,
        };
        let out = kernels::conv1d_rows(self.data(x), self.data(w), self.data(b), dims);
        Ok(self.push(Tensor::new(&[rows, c_out], out)?, Op::Conv1d { x, w, b, dims }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let n = self.value(x).cols();
        let mut out = self.data(x).to_vec();
        kernels::softmax_rows_inplace(&mut out, n);
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(&shape, out).expect("same shape"), Op::Softmax(x))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != b {
            return Err(shape_err("cross_entropy labels", &[b], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::OutOfRange {
                what: "class label",
                index: bad,
                limit: k,
            });
        }
        let mut probs = self.data(logits).to_vec();
        kernels::softmax_rows_inplace(&mut probs, k);
        // log-sum-exp form keeps the loss finite when a probability underflows
        let mut loss = F::zero();
        for (r, &l) in labels.iter().enumerate() {
            let row = &self.data(logits)[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            loss = loss + (lse - row[l]);
        }
        loss = loss / F::from_usize(b).unwrap();
        Ok(self.push(
            Tensor::new(&[1], vec![loss])?,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Max over each `seq_len`-row block: `[(B·T)×d] → [B×d]`.
    pub fn max_pool_time(&mut self, x: Var, seq_len: usize) -> Result<Var> {
        let (rows, d) = self.dims2(x, "max_pool_time")?;
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::InvalidArgument(format!(
                "max_pool_time: {rows} rows is not a multiple of {seq_len}"
            )));
        }
        let batch = rows / seq_len;
        let xs = self.data(x);
        let mut out = vec![F::zero(); batch * d];
        let mut argmax = vec![0usize; batch * d];
        for b in 0..batch {
            for c in 0..d {
                let mut best = b * seq_len;
                for t in 1..seq_len {
                    let r = b * seq_len + t;
                    if xs[r * d + c] > xs[best * d + c] {
                        best = r;
                    }
                }
                out[b * d + c] = xs[best * d + c];
                argmax[b * d + c] = best * d + c;
            }
        }
        Ok(self.push(Tensor::new(&[batch, d], out)?, Op::MaxPoolTime { x, argmax }))
    }

    /// Fused multi-head scaled dot-product attention. `q`, `k`, `v` are
    /// `[(B·T)×(H·dh)]`; head `h` owns columns `h·dh..(h+1)·dh`. Returns the
    /// context (same shape) and the attention probabilities `[B×H×T×T]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
    ) -> Result<(Var, Tensor<F>)> {
        let (rows, width) = self.dims2(q, "attention")?;
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        if heads == 0 || width % heads != 0 || seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::InvalidArgument(format!(
                "attention: width {width} / heads {heads} / rows {rows} / seq_len {seq_len} incompatible"
            )));
        }
        let dims = AttnDims {
            batch: rows / seq_len,
            seq_len,
            heads,
            head_dim: width / heads,
        };
        let (ctx, probs) = kernels::attention_forward(self.data(q), self.data(k), self.data(v), dims);
        let probs_t = Tensor::new(&[dims.batch, heads, seq_len, seq_len], probs.clone())?;
        let var = self.push(
            Tensor::new(&[rows, width], ctx)?,
            Op::Attention { q, k, v, dims, probs },
        );
        Ok((var, probs_t))
    }

    /// `Σ x²` as a scalar.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().map(|&v| v * v).sum();
        self.push(Tensor::new(&[1], vec![s]).unwrap(), Op::SumSquares(x))
    }

    /// `Σ |x|` as a scalar.
    pub fn abs_sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().map(|&v| v.abs()).sum();
        self.push(Tensor::new(&[1], vec![s]).unwrap(), Op::AbsSum(x))
    }

    /// `Σ x ⊙ w` for a constant `w`; used to reduce arbitrary outputs to a
    /// scalar in gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<F>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(shape_err("weighted_sum", self.shape(x), &[weights.len()]));
        }
        let s = self.data(x).iter().zip(&weights).map(|(&a, &b)| a * b).sum();
        Ok(self.push(Tensor::new(&[1], vec![s])?, Op::WeightedSum { x, weights }))
    }

    /// Runs reverse-mode differentiation from the scalar `loss` and returns
    /// the gradient of every node (`None` for nodes the loss does not reach).
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", &[1], self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let mut da = vec![F::zero(); m * k];
                kernels::matmul_bt_acc(g, self.data(*b), &mut da, m, n, k);
                let mut db = vec![F::zero(); k * n];
                kernels::matmul_at_acc(self.data(*a), g, &mut db, m, k, n);
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::AddBias(x, b) => {
                let n = self.value(*b).len();
                let mut db = vec![F::zero(); n];
                for row in g.chunks(n) {
                    for (o, &v) in db.iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
                accumulate(grads, *x, g);
                accumulate(grads, *b, &db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g);
                let neg: Vec<F> = g.iter().map(|&v| -v).collect();
                accumulate(grads, *b, &neg);
            }
            Op::Scale(x, c) => {
                let d: Vec<F> = g.iter().map(|&v| v * *c).collect();
                accumulate(grads, *x, &d);
            }
            Op::AddPositional { x, pos, seq_len } => {
                let d = self.value(*pos).cols();
                let mut dp = vec![F::zero(); seq_len * d];
                for (idx, &v) in g.iter().enumerate() {
                    let t = (idx / d) % seq_len;
                    dp[t * d + idx % d] = dp[t * d + idx % d] + v;
                }
                accumulate(grads, *x, g);
                accumulate(grads, *pos, &dp);
            }
            Op::Relu(x) => {
                let d: Vec<F> = self
                    .data(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > F::zero() { gv } else { F::zero() })
                    .collect();
                accumulate(grads, *x, &d);
            }
            Op::MaskScale { x, mask } => {
                let d: Vec<F> = g.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                accumulate(grads, *x, &d);
            }
            Op::Overwrite { x, mask } => {
                let d: Vec<F> = g
                    .iter()
                    .zip(mask)
                    .map(|(&a, &m)| if m { F::zero() } else { a })
                    .collect();
                accumulate(grads, *x, &d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gamma).len();
                let (dgamma, dbeta, dxhat) = affine_backward(g, xhat, self.data(*gamma), n);
                let nf = F::from_usize(n).unwrap();
                let mut dx = vec![F::zero(); g.len()];
                for (r, is) in inv_std.iter().enumerate() {
                    let dxh = &dxhat[r * n..(r + 1) * n];
                    let xh = &xhat[r * n..(r + 1) * n];
                    let s1: F = dxh.iter().copied().sum();
                    let s2: F = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                    for c in 0..n {
                        dx[r * n + c] = *is / nf * (nf * dxh[c] - s1 - xh[c] * s2);
                    }
                }
                accumulate(grads, *x, &dx);
                accumulate(grads, *gamma, &dgamma);
                accumulate(grads, *beta, &dbeta);
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gamma).len();
                let rows = g.len() / n;
                let nf = F::from_usize(rows).unwrap();
                let (dgamma, dbeta, dxhat) = affine_backward(g, xhat, self.data(*gamma), n);
                let mut s1 = vec![F::zero(); n];
                let mut s2 = vec![F::zero(); n];
                for r in 0..rows {
                    for c in 0..n {
                        s1[c] = s1[c] + dxhat[r * n + c];
                        s2[c] = s2[c] + dxhat[r * n + c] * xhat[r * n + c];
                    }
                }
                let mut dx = vec![F::zero(); g.len()];
                for r in 0..rows {
                    for c in 0..n {
                        let idx = r * n + c;
                        dx[idx] = inv_std[c] / nf * (nf * dxhat[idx] - s1[c] - xhat[idx] * s2[c]);
                    }
                }
                accumulate(grads, *x, &dx);
                accumulate(grads, *gamma, &dgamma);
                accumulate(grads, *beta, &dbeta);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gamma).len();
                let (dgamma, dbeta, dxhat) = affine_backward(g, xhat, self.data(*gamma), n);
                let dx: Vec<F> = dxhat
                    .iter()
                    .enumerate()
                    .map(|(idx, &v)| v * inv_std[idx % n])
                    .collect();
                accumulate(grads, *x, &dx);
                accumulate(grads, *gamma, &dgamma);
                accumulate(grads, *beta, &dbeta);
            }
            Op::Conv1d { x, w, b, dims } => {
                let (dx, dw, db) = kernels::conv1d_rows_backward(self.data(*x), self.data(*w), g, *dims);
                accumulate(grads, *x, &dx);
                accumulate(grads, *w, &dw);
                accumulate(grads, *b, &db);
            }
            Op::Softmax(x) => {
                let n = node.value.cols();
                let dx = kernels::softmax_rows_backward(node.value.data(), g, n);
                accumulate(grads, *x, &dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.value(*logits).cols();
                let scale = g[0] / F::from_usize(labels.len()).unwrap();
                let mut d = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] = d[r * k + l] - F::one();
                }
                for v in d.iter_mut() {
                    *v = *v * scale;
                }
                accumulate(grads, *logits, &d);
            }
            Op::MaxPoolTime { x, argmax } => {
                let mut dx = vec![F::zero(); self.value(*x).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] = dx[src] + gv;
                }
                accumulate(grads, *x, &dx);
            }
            Op::Attention { q, k, v, dims, probs } => {
                let (dq, dk, dv) = kernels::attention_backward(
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    probs,
                    g,
                    *dims,
                );
                accumulate(grads, *q, &dq);
                accumulate(grads, *k, &dk);
                accumulate(grads, *v, &dv);
            }
            Op::SumSquares(x) => {
                let two = F::lit(2.0);
                let d: Vec<F> = self.data(*x).iter().map(|&v| two * v * g[0]).collect();
                accumulate(grads, *x, &d);
            }
            Op::AbsSum(x) => {
                let d: Vec<F> = self
                    .data(*x)
                    .iter()
                    .map(|&v| {
                        if v > F::zero() {
                            g[0]
                        } else if v < F::zero() {
                            -g[0]
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                accumulate(grads, *x, &d);
            }
            Op::WeightedSum { x, weights } => {
                let d: Vec<F> = weights.iter().map(|&w| w * g[0]).collect();
                accumulate(grads, *x, &d);
            }
        }
    }
}

/// Per-node gradients returned by [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros if unreached.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<F> {
        self.get(v).map_or_else(|| vec![F::zero(); len], <[F]>::to_vec)
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, d: &[F]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &x) in acc.iter_mut().zip(d) {
                *a = *a + x;
            }
        }
        slot @ None => *slot = Some(d.to_vec()),
    }
}

fn normalize_cols<F: Real>(x: &[F], mean: &[F], inv_std: &[F], n: usize) -> Vec<F> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| (v - mean[i % n]) * inv_std[i % n])
        .collect()
}

fn affine_cols<F: Real>(xhat: &[F], gamma: &[F], beta: &[F], n: usize) -> Vec<F> {
    xhat.iter()
        .enumerate()
        .map(|(i, &v)| gamma[i % n] * v + beta[i % n])
        .collect()
}

/// Returns (dγ, dβ, dx̂) for `y = γ·x̂ + β` applied per column.
fn affine_backward<F: Real>(g: &[F], xhat: &[F], gamma: &[F], n: usize) -> (Vec<F>, Vec<F>, Vec<F>) {
    let mut dgamma = vec![F::zero(); n];
    let mut dbeta = vec![F::zero(); n];
    let mut dxhat = vec![F::zero(); g.len()];
    for (i, (&gv, &xv)) in g.iter().zip(xhat).enumerate() {
        let c = i % n;
        dgamma[c] = dgamma[c] + gv * xv;
        dbeta[c] = dbeta[c] + gv;
        dxhat[i] = gv * gamma[c];
    }
    (dgamma, dbeta, dxhat)
}
