// SPDX-License-Identifier: MIT OR Apache-2.0

//! Slice-level numeric kernels shared by the tape and the functional API.
//!
//! Matrices are row-major. Activations flowing through the model use a
//! "rows = (instance, timestep), columns = features" layout, so sequence
//! operators take the sequence length explicitly and never mix rows across
//! instance boundaries.

use super::tensor::Real;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_bt_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = F::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                s = s + x * y;
            }
            out[i * n + j] = out[i * n + j] + s;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · c[m×n]`
pub fn matmul_at_acc<F: Real>(a: &[F], c: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let c_row = &c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &cv) in out_row.iter_mut().zip(c_row) {
                *o = *o + av * cv;
            }
        }
    }
}

/// Reorders conv weights `[c_out × c_in × k]` to `[k × c_in × c_out]` so the
/// innermost loop runs over contiguous output channels.
pub fn conv_weight_kio<F: Real>(w: &[F], c_out: usize, c_in: usize, k: usize) -> Vec<F> {
    let mut r = vec![F::zero(); w.len()];
    for o in 0..c_out {
        for c in 0..c_in {
            for j in 0..k {
                r[(j * c_in + c) * c_out + o] = w[(o * c_in + c) * k + j];
            }
        }
    }
    r
}

/// Shape bundle for the row-layout 1-D convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub seq_len: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvDims {
    /// Input row feeding output row `t` through tap `j`, if inside the sequence.
    #[inline]
    fn src(&self, t: usize, j: usize) -> Option<usize> {
        let s = t + j;
        if s < self.pad || s - self.pad >= self.seq_len {
            None
        } else {
            Some(s - self.pad)
        }
    }
}

/// Cross-correlation over time on `x[(B·T)×c_in]` producing `[(B·T)×c_out]`.
pub fn conv1d_rows<F: Real>(x: &[F], w: &[F], bias: &[F], d: ConvDims) -> Vec<F> {
    let wr = conv_weight_kio(w, d.c_out, d.c_in, d.kernel);
    let mut out = vec![F::zero(); d.batch * d.seq_len * d.c_out];
    for b in 0..d.batch {
        for t in 0..d.seq_len {
            let orow = &mut out[(b * d.seq_len + t) * d.c_out..(b * d.seq_len + t + 1) * d.c_out];
            orow.copy_from_slice(bias);
            for j in 0..d.kernel {
                let Some(s) = d.src(t, j) else { continue };
                let xrow = &x[(b * d.seq_len + s) * d.c_in..(b * d.seq_len + s + 1) * d.c_in];
                for (c, &xv) in xrow.iter().enumerate() {
                    let wrow = &wr[(j * d.c_in + c) * d.c_out..(j * d.c_in + c + 1) * d.c_out];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o = *o + xv * wv;
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv1d_rows`] with respect to input, weight and bias.
pub fn conv1d_rows_backward<F: Real>(
    x: &[F],
    w: &[F],
    dy: &[F],
    d: ConvDims,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let wr = conv_weight_kio(w, d.c_out, d.c_in, d.kernel);
    let mut dx = vec![F::zero(); x.len()];
    let mut dwr = vec![F::zero(); w.len()];
    let mut db = vec![F::zero(); d.c_out];
    for b in 0..d.batch {
        for t in 0..d.seq_len {
            let r = b * d.seq_len + t;
            let dyrow = &dy[r * d.c_out..(r + 1) * d.c_out];
            for (g, &v) in db.iter_mut().zip(dyrow) {
                *g = *g + v;
            }
            for j in 0..d.kernel {
                let Some(s) = d.src(t, j) else { continue };
                let xr = b * d.seq_len + s;
                for c in 0..d.c_in {
                    let base = (j * d.c_in + c) * d.c_out;
                    let wrow = &wr[base..base + d.c_out];
                    let mut acc = F::zero();
                    for (&g, &wv) in dyrow.iter().zip(wrow) {
                        acc = acc + g * wv;
                    }
                    dx[xr * d.c_in + c] = dx[xr * d.c_in + c] + acc;
                    let xv = x[xr * d.c_in + c];
                    let dwrow = &mut dwr[base..base + d.c_out];
                    for (g, &dv) in dwrow.iter_mut().zip(dyrow) {
                        *g = *g + xv * dv;
                    }
                }
            }
        }
    }
    let mut dw = vec![F::zero(); w.len()];
    for o in 0..d.c_out {
        for c in 0..d.c_in {
            for j in 0..d.kernel {
                dw[(o * d.c_in + c) * d.kernel + j] = dwr[(j * d.c_in + c) * d.c_out + o];
            }
        }
    }
    (dx, dw, db)
}

/// Numerically stable softmax of each `n`-wide row, in place.
pub fn softmax_rows_inplace<F: Real>(x: &mut [F], n: usize) {
    for row in x.chunks_mut(n) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Backward of a row softmax given its output `y` and upstream `dy`.
pub fn softmax_rows_backward<F: Real>(y: &[F], dy: &[F], n: usize) -> Vec<F> {
    let mut dx = vec![F::zero(); y.len()];
    for ((yr, dyr), dxr) in y.chunks(n).zip(dy.chunks(n)).zip(dx.chunks_mut(n)) {
        let dot: F = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *o = yv * (g - dot);
        }
    }
    dx
}

/// Normalizes each `n`-wide row; returns (normalized, inverse std per row).
pub fn layer_norm_rows<F: Real>(x: &[F], n: usize, eps: F) -> (Vec<F>, Vec<F>) {
    let nf = F::from_usize(n).unwrap();
    let mut xhat = vec![F::zero(); x.len()];
    let mut inv = Vec::with_capacity(x.len() / n);
    for (row, out) in x.chunks(n).zip(xhat.chunks_mut(n)) {
        let mean = row.iter().copied().sum::<F>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
        let is = F::one() / (var + eps).sqrt();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        inv.push(is);
    }
    (xhat, inv)
}

/// Per-column batch statistics over all rows: (mean, biased variance).
pub fn column_stats<F: Real>(x: &[F], rows: usize, cols: usize) -> (Vec<F>, Vec<F>) {
    let nf = F::from_usize(rows).unwrap();
    let mut mean = vec![F::zero(); cols];
    for r in 0..rows {
        for (m, &v) in mean.iter_mut().zip(&x[r * cols..(r + 1) * cols]) {
            *m = *m + v;
        }
    }
    for m in mean.iter_mut() {
        *m = *m / nf;
    }
    let mut var = vec![F::zero(); cols];
    for r in 0..rows {
        for ((s, &v), &m) in var.iter_mut().zip(&x[r * cols..(r + 1) * cols]).zip(&mean) {
            *s = *s + (v - m) * (v - m);
        }
    }
    for s in var.iter_mut() {
        *s = *s / nf;
    }
    (mean, var)
}

/// Dimensions for fused multi-head attention over row-layout activations.
#[derive(Clone, Copy, Debug)]
pub struct AttnDims {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnDims {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Offset of the `T×T` probability block for (instance, head).
    pub fn prob_offset(&self, b: usize, h: usize) -> usize {
        (b * self.heads + h) * self.seq_len * self.seq_len
    }
}

fn gather_head<F: Real>(m: &[F], d: AttnDims, b: usize, h: usize) -> Vec<F> {
    let w = d.width();
    let mut out = Vec::with_capacity(d.seq_len * d.head_dim);
    for t in 0..d.seq_len {
        let base = (b * d.seq_len + t) * w + h * d.head_dim;
        out.extend_from_slice(&m[base..base + d.head_dim]);
    }
    out
}

fn scatter_head_acc<F: Real>(m: &mut [F], src: &[F], d: AttnDims, b: usize, h: usize) {
    let w = d.width();
    for t in 0..d.seq_len {
        let base = (b * d.seq_len + t) * w + h * d.head_dim;
        for (o, &v) in m[base..base + d.head_dim]
            .iter_mut()
            .zip(&src[t * d.head_dim..(t + 1) * d.head_dim])
        {
            *o = *o + v;
        }
    }
}

/// Scaled dot-product attention per (instance, head). Returns the
/// concatenated per-head contexts `[(B·T)×(H·dh)]` and the attention
/// probabilities `[B×H×T×T]` (rows = queries, columns = keys).
pub fn attention_forward<F: Real>(q: &[F], k: &[F], v: &[F], d: AttnDims) -> (Vec<F>, Vec<F>) {
    let t = d.seq_len;
    let scale = F::one() / F::from_usize(d.head_dim).unwrap().sqrt();
    let mut ctx = vec![F::zero(); q.len()];
    let mut probs = vec![F::zero(); d.batch * d.heads * t * t];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let qh = gather_head(q, d, b, h);
            let kh = gather_head(k, d, b, h);
            let vh = gather_head(v, d, b, h);
            let off = d.prob_offset(b, h);
            let a = &mut probs[off..off + t * t];
            matmul_bt_acc(&qh, &kh, a, t, d.head_dim, t);
            for s in a.iter_mut() {
                *s = *s * scale;
            }
            softmax_rows_inplace(a, t);
            let mut ch = vec![F::zero(); t * d.head_dim];
            matmul_acc(a, &vh, &mut ch, t, t, d.head_dim);
            scatter_head_acc(&mut ctx, &ch, d, b, h);
        }
    }
    (ctx, probs)
}

/// Gradients of [`attention_forward`] with respect to q, k and v.
pub fn attention_backward<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    dctx: &[F],
    d: AttnDims,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let t = d.seq_len;
    let dh = d.head_dim;
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
    let mut dq = vec![F::zero(); q.len()];
    let mut dk = vec![F::zero(); k.len()];
    let mut dv = vec![F::zero(); v.len()];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let qh = gather_head(q, d, b, h);
            let kh = gather_head(k, d, b, h);
            let vh = gather_head(v, d, b, h);
            let dch = gather_head(dctx, d, b, h);
            let off = d.prob_offset(b, h);
            let a = &probs[off..off + t * t];

            let mut dvh = vec![F::zero(); t * dh];
            matmul_at_acc(a, &dch, &mut dvh, t, t, dh);
            let mut da = vec![F::zero(); t * t];
            matmul_bt_acc(&dch, &vh, &mut da, t, dh, t);
            let mut ds = softmax_rows_backward(a, &da, t);
            for s in ds.iter_mut() {
                *s = *s * scale;
            }
            let mut dqh = vec![F::zero(); t * dh];
            matmul_acc(&ds, &kh, &mut dqh, t, t, dh);
            let mut dkh = vec![F::zero(); t * dh];
            matmul_at_acc(&ds, &qh, &mut dkh, t, t, dh);

            scatter_head_acc(&mut dq, &dqh, d, b, h);
            scatter_head_acc(&mut dk, &dkh, d, b, h);
            scatter_head_acc(&mut dv, &dvh, d, b, h);
        }
    }
    (dq, dk, dv)
}
