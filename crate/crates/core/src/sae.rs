// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse autoencoder over MLP-output activations.
//!
//! ```text
//! z  = max(0, (x − μ)·W_enc + b_enc)
//! x̂ = z·W_dec + b_dec + μ
//! L  = ‖x − x̂‖² + λ Σ_j |z_j|        (averaged over the batch)
//! ```
//!
//! `μ` is the train-activation mean when centering is enabled and zero
//! otherwise.

use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, KIND_SAE};
use crate::dataset::TimeSeriesInstance;
use crate::error::{Error, Result};
use crate::model::{ActivationCache, ForwardMode, TapPoint, TstModel};
use crate::nn::kernels::matmul_acc;
use crate::nn::rng::{SeedStreams, Stream};
use crate::nn::{Graph, RAdam, RAdamConfig, Real, Tensor};

/// Codes at or below this value count as inactive; a neuron whose maximum
/// stays below it is dead.
pub const ACTIVE_EPS: f32 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeConfig {
    pub input_dim: usize,
    pub code_dim: usize,
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Subtract the train-activation mean before encoding.
    pub center: bool,
    /// Encoder layer whose MLP output is modelled.
    pub layer: usize,
    /// Rescale every decoder row to unit L2 norm at init and after each
    /// step, so the L1 penalty cannot be dodged by shrinking codes while
    /// growing the decoder.
    pub unit_norm_decoder: bool,
}

impl Default for SaeConfig {
    fn default() -> Self {
        Self {
            input_dim: 64,
            code_dim: 128,
            lambda: 1e-3,
            lr: 1e-3,
            epochs: 200,
            batch_size: 256,
            seed: 0,
            center: true,
            layer: 0,
            unit_norm_decoder: true,
        }
    }
}

impl SaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.code_dim == 0 {
            return Err(Error::InvalidArgument("SAE dimensions must be ≥ 1".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("SAE lambda {} must be ≥ 0", self.lambda)));
        }
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid SAE schedule {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseAutoencoder<F: Real = f32> {
    pub config: SaeConfig,
    /// `[d × H]`
    pub enc_w: Tensor<F>,
    pub enc_b: Tensor<F>,
    /// `[H × d]`
    pub dec_w: Tensor<F>,
    pub dec_b: Tensor<F>,
    /// `[d]`, zero when centering is off.
    pub input_mean: Tensor<F>,
}

impl<F: Real> SparseAutoencoder<F> {
    /// Random init: encoder `U(±1/√d)`, decoder `U(±1/√H)`, zero biases.
    pub fn new(config: SaeConfig, input_mean: Vec<F>) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.input_dim, config.code_dim);
        if input_mean.len() != d {
            return Err(Error::Shape {
                op: "sae mean",
                expected: vec![d],
                actual: vec![input_mean.len()],
            });
        }
        let mut rng = SeedStreams::new(config.seed).stream(Stream::SaeInit);
        let mut uniform = |n: usize, bound: f64| -> Vec<F> {
            (0..n).map(|_| F::lit(rng.random_range(-bound..bound))).collect()
        };
        let enc_w = Tensor::new(&[d, h], uniform(d * h, 1.0 / (d as f64).sqrt()))?;
        let dec_w = Tensor::new(&[h, d], uniform(h * d, 1.0 / (h as f64).sqrt()))?;
        Ok(Self {
            enc_w,
            enc_b: Tensor::zeros(&[h]),
            dec_w,
            dec_b: Tensor::zeros(&[d]),
            input_mean: Tensor::new(&[d], input_mean)?,
            config,
        })
    }

    pub fn cast<G: Real>(&self) -> SparseAutoencoder<G> {
        SparseAutoencoder {
            config: self.config.clone(),
            enc_w: self.enc_w.cast(),
            enc_b: self.enc_b.cast(),
            dec_w: self.dec_w.cast(),
            dec_b: self.dec_b.cast(),
            input_mean: self.input_mean.cast(),
        }
    }

    fn check_rows(&self, x: &Tensor<F>) -> Result<usize> {
        let d = self.config.input_dim;
        if x.shape().len() != 2 || x.cols() != d {
            return Err(Error::Shape {
                op: "sae input",
                expected: vec![x.shape().first().copied().unwrap_or(0), d],
                actual: x.shape().to_vec(),
            });
        }
        Ok(x.rows())
    }

    fn centered(&self, x: &Tensor<F>) -> Result<Vec<F>> {
        let n = self.check_rows(x)?;
        let d = self.config.input_dim;
        let mu = self.input_mean.data();
        let mut out = x.data().to_vec();
        for r in 0..n {
            for (v, &m) in out[r * d..(r + 1) * d].iter_mut().zip(mu) {
                *v = *v - m;
            }
        }
        Ok(out)
    }

    /// Codes for every row of `x` (`[N × d]` → `[N × H]`).
    pub fn encode(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let n = self.check_rows(x)?;
        let (d, h) = (self.config.input_dim, self.config.code_dim);
        let xc = self.centered(x)?;
        let mut z = vec![F::zero(); n * h];
        matmul_acc(&xc, self.enc_w.data(), &mut z, n, d, h);
        for row in z.chunks_mut(h) {
            for (v, &b) in row.iter_mut().zip(self.enc_b.data()) {
                *v = (*v + b).max(F::zero());
            }
        }
        Tensor::new(&[n, h], z)
    }

    /// Reconstructions for every row of `z` (`[N × H]` → `[N × d]`).
    pub fn decode(&self, z: &Tensor<F>) -> Result<Tensor<F>> {
        let (d, h) = (self.config.input_dim, self.config.code_dim);
        if z.shape().len() != 2 || z.cols() != h {
            return Err(Error::Shape {
                op: "sae decode",
                expected: vec![z.shape().first().copied().unwrap_or(0), h],
                actual: z.shape().to_vec(),
            });
        }
        let n = z.rows();
        let mut x = vec![F::zero(); n * d];
        matmul_acc(z.data(), self.dec_w.data(), &mut x, n, h, d);
        for row in x.chunks_mut(d) {
            for ((v, &b), &m) in row.iter_mut().zip(self.dec_b.data()).zip(self.input_mean.data()) {
                *v = *v + b + m;
            }
        }
        Tensor::new(&[n, d], x)
    }

    pub fn reconstruct(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        self.decode(&self.encode(x)?)
    }
}

/// Builds the training objective on a tape and returns it together with
/// the parameter leaves `[enc_w, enc_b, dec_w, dec_b]`.
fn loss_graph<F: Real>(sae: &SparseAutoencoder<F>, batch: &Tensor<F>) -> Result<(Graph<F>, crate::nn::Var, [crate::nn::Var; 4])> {
    let n = sae.check_rows(batch)?;
    if n == 0 {
        return Err(Error::InvalidArgument("empty SAE batch".into()));
    }
    let d = sae.config.input_dim;
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(&[n, d], sae.centered(batch)?)?);
    let we = g.leaf(sae.enc_w.clone());
    let be = g.leaf(sae.enc_b.clone());
    let wd = g.leaf(sae.dec_w.clone());
    let bd = g.leaf(sae.dec_b.clone());
    let pre = g.linear(x, we, be)?;
    let z = g.relu(pre);
    let xhat = g.linear(z, wd, bd)?;
    let diff = g.sub(xhat, x)?;
    let rec = g.sum_squares(diff);
    let l1 = g.abs_sum(z);
    let l1 = g.scale(l1, F::lit(sae.config.lambda));
    let total = g.add(rec, l1)?;
    let loss = g.scale(total, F::one() / F::lit(n as f64));
    Ok((g, loss, [we, be, wd, bd]))
}

/// Batch-mean objective as computed by the trainer.
pub fn batch_loss<F: Real>(sae: &SparseAutoencoder<F>, batch: &Tensor<F>) -> Result<F> {
    let (g, loss, _) = loss_graph(sae, batch)?;
    Ok(g.value(loss).data()[0])
}

/// The same objective evaluated row by row with plain loops in `f64`.
pub fn direct_loss<F: Real>(sae: &SparseAutoencoder<F>, batch: &Tensor<F>) -> Result<f64> {
    let n = sae.check_rows(batch)?;
    let (d, h) = (sae.config.input_dim, sae.config.code_dim);
    let f = |t: &Tensor<F>| -> Vec<f64> { t.data().iter().map(|v| v.to_f64().unwrap()).collect() };
    let (we, be, wd, bd, mu) = (f(&sae.enc_w), f(&sae.enc_b), f(&sae.dec_w), f(&sae.dec_b), f(&sae.input_mean));
    let x = f(batch);
    let mut total = 0.0;
    for r in 0..n {
        let xr: Vec<f64> = (0..d).map(|i| x[r * d + i] - mu[i]).collect();
        let mut z = vec![0.0; h];
        for (j, zj) in z.iter_mut().enumerate() {
            let mut s = be[j];
            for i in 0..d {
                s += xr[i] * we[i * h + j];
            }
            *zj = s.max(0.0);
        }
        let mut err = 0.0;
        for i in 0..d {
            let mut s = bd[i];
            for j in 0..h {
                s += z[j] * wd[j * d + i];
            }
            err += (s - xr[i]).powi(2);
        }
        total += err + sae.config.lambda * z.iter().map(|v| v.abs()).sum::<f64>();
    }
    Ok(total / n as f64)
}

/// Rows of activations with the instance and timestep each came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationSet {
    pub layer: usize,
    /// `[N·T × d]`, instance-major then timestep.
    pub rows: Tensor<f32>,
    pub provenance: Vec<RowSource>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowSource {
    pub instance: usize,
    pub t: usize,
    pub label: usize,
}

/// Eval-mode MLP outputs of `layer` for every instance.
pub fn collect_activations(model: &TstModel<f32>, instances: &[TimeSeriesInstance], layer: usize) -> Result<ActivationSet> {
    let cfg = model.config();
    TapPoint::MlpOut { layer }.validate(cfg)?;
    let per: Vec<Result<Vec<f32>>> = instances
        .par_iter()
        .map(|inst| {
            let (_, cache) = model.forward(&inst.values, ForwardMode::Eval, true)?;
            Ok(cache.expect("capture requested").mlp_out(layer)?.data().to_vec())
        })
        .collect();
    let (t, d) = (cfg.seq_len, cfg.d_model);
    let mut data = Vec::with_capacity(instances.len() * t * d);
    let mut provenance = Vec::with_capacity(instances.len() * t);
    for (i, (inst, rows)) in instances.iter().zip(per).enumerate() {
        data.extend(rows?);
        provenance.extend((0..t).map(|ti| RowSource {
            instance: i,
            t: ti,
            label: inst.label,
        }));
    }
    Ok(ActivationSet {
        layer,
        rows: Tensor::new(&[instances.len() * t, d], data)?,
        provenance,
    })
}

/// Column means of `[N × d]` rows.
pub fn column_means(x: &Tensor<f32>) -> Vec<f32> {
    let (n, d) = (x.rows(), x.cols());
    let mut acc = vec![0.0f64; d];
    for r in 0..n {
        for (a, &v) in acc.iter_mut().zip(x.row(r)) {
            *a += v as f64;
        }
    }
    acc.into_iter().map(|s| (s / n.max(1) as f64) as f32).collect()
}

/// Whole-dataset quality figures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeStats {
    pub loss: f64,
    /// Mean squared reconstruction error per element.
    pub mse: f64,
    /// Mean per-dimension variance of the inputs.
    pub input_variance: f64,
    /// Fraction of code entries above [`ACTIVE_EPS`].
    pub active_fraction: f64,
}

pub fn sae_stats(sae: &SparseAutoencoder<f32>, x: &Tensor<f32>) -> Result<SaeStats> {
    let n = sae.check_rows(x)?;
    if n == 0 {
        return Err(Error::InvalidArgument("no activations".into()));
    }
    let d = sae.config.input_dim;
    let z = sae.encode(x)?;
    let xhat = sae.decode(&z)?;
    let se: f64 = x
        .data()
        .iter()
        .zip(xhat.data())
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum();
    let l1: f64 = z.data().iter().map(|&v| v as f64).sum();
    let active = z.data().iter().filter(|&&v| v > ACTIVE_EPS).count();
    let means = column_means(x);
    let mut var = 0.0f64;
    for r in 0..n {
        for (&v, &m) in x.row(r).iter().zip(&means) {
            var += ((v - m) as f64).powi(2);
        }
    }
    Ok(SaeStats {
        loss: (se + sae.config.lambda * l1) / n as f64,
        mse: se / (n * d) as f64,
        input_variance: var / (n * d) as f64,
        active_fraction: active as f64 / z.len() as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeEpoch {
    pub epoch: usize,
    /// Mean batch objective over the epoch.
    pub loss: f64,
}

pub struct SaeTraining {
    pub sae: SparseAutoencoder<f32>,
    pub curve: Vec<SaeEpoch>,
    pub stats: SaeStats,
}

fn normalize_rows(w: &mut Tensor<f32>) {
    let cols = w.cols();
    for row in w.data_mut().chunks_mut(cols) {
        let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
        }
    }
}

/// Trains on the rows of `x` with shuffled mini-batches and RAdam steps.
pub fn train_sae(x: &Tensor<f32>, config: &SaeConfig) -> Result<SaeTraining> {
    config.validate()?;
    if x.shape().len() != 2 || x.cols() != config.input_dim {
        return Err(Error::Shape {
            op: "train_sae",
            expected: vec![x.shape().first().copied().unwrap_or(0), config.input_dim],
            actual: x.shape().to_vec(),
        });
    }
    let n = x.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("no activations to train on".into()));
    }
    let d = config.input_dim;
    let mean = if config.center { column_means(x) } else { vec![0.0; d] };
    let mut sae = SparseAutoencoder::new(config.clone(), mean)?;
    if config.unit_norm_decoder {
        normalize_rows(&mut sae.dec_w);
    }
    let mut opt = RAdam::<f32>::new(RAdamConfig {
        lr: config.lr,
        ..RAdamConfig::default()
    });
    let mut rng = SeedStreams::new(config.seed).stream(Stream::SaeShuffle);
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    let mut batch = Vec::with_capacity(config.batch_size * d);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0f64;
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            for &i in chunk {
                batch.extend_from_slice(x.row(i));
            }
            let xb = Tensor::new(&[chunk.len(), d], batch.clone())?;
            let (g, loss, vars) = loss_graph(&sae, &xb)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("SAE loss at epoch {epoch}")));
            }
            let grads = g.backward(loss)?;
            let params = [&mut sae.enc_w, &mut sae.enc_b, &mut sae.dec_w, &mut sae.dec_b];
            for (p, v) in params.into_iter().zip(vars) {
                p.set_grad(grads.get_or_zeros(v, p.len()))?;
            }
            let mut refs: [(&str, &mut Tensor<f32>); 4] = [
                ("encoder.weight", &mut sae.enc_w),
                ("encoder.bias", &mut sae.enc_b),
                ("decoder.weight", &mut sae.dec_w),
                ("decoder.bias", &mut sae.dec_b),
            ];
            opt.step(&mut refs)?;
            if config.unit_norm_decoder {
                normalize_rows(&mut sae.dec_w);
            }
            sum += value as f64;
            steps += 1;
        }
        curve.push(SaeEpoch {
            epoch,
            loss: sum / steps as f64,
        });
    }
    for p in [&mut sae.enc_w, &mut sae.enc_b, &mut sae.dec_w, &mut sae.dec_b] {
        p.clear_grad();
    }
    let stats = sae_stats(&sae, x)?;
    info!(
        "SAE λ={} mse={:.6} active={:.4}",
        config.lambda, stats.mse, stats.active_fraction
    );
    Ok(SaeTraining { sae, curve, stats })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronHit {
    pub instance: usize,
    pub t: usize,
    pub activation: f32,
    pub true_class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronReport {
    pub neuron: usize,
    pub dead: bool,
    pub max_activation: f32,
    pub mean_activation: f64,
    pub active_fraction: f64,
    /// Highest activations first, ties by row order.
    pub hits: Vec<NeuronHit>,
    /// Most common true class among the hits and its share.
    pub dominant_class: Option<usize>,
    pub purity: f64,
}

/// Ranks the rows of precomputed `codes` by the activation of `neuron`.
pub fn neuron_report(codes: &Tensor<f32>, provenance: &[RowSource], neuron: usize, top_n: usize) -> Result<NeuronReport> {
    let h = codes.cols();
    if neuron >= h {
        return Err(Error::OutOfRange {
            what: "SAE neuron",
            index: neuron,
            limit: h,
        });
    }
    if provenance.len() != codes.rows() {
        return Err(Error::InvalidArgument("provenance does not match activation rows".into()));
    }
    let col: Vec<f32> = (0..codes.rows()).map(|r| codes.at(r, neuron)).collect();
    let max = col.iter().copied().fold(0.0f32, f32::max);
    let n = col.len().max(1) as f64;
    let mean = col.iter().map(|&v| v as f64).sum::<f64>() / n;
    let active = col.iter().filter(|&&v| v > ACTIVE_EPS).count() as f64 / n;
    let dead = max < ACTIVE_EPS;
    let mut hits = Vec::new();
    let mut dominant_class = None;
    let mut purity = 0.0;
    if !dead {
        let mut idx: Vec<usize> = (0..col.len()).filter(|&r| col[r] > ACTIVE_EPS).collect();
        idx.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
        idx.truncate(top_n);
        hits = idx
            .iter()
            .map(|&r| NeuronHit {
                instance: provenance[r].instance,
                t: provenance[r].t,
                activation: col[r],
                true_class: provenance[r].label,
            })
            .collect();
        let classes = hits.iter().map(|h| h.true_class).max().map_or(0, |m| m + 1);
        let mut counts = vec![0usize; classes];
        for hit in &hits {
            counts[hit.true_class] += 1;
        }
        if let Some((c, &k)) = counts.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))) {
            dominant_class = Some(c);
            purity = k as f64 / hits.len() as f64;
        }
    }
    Ok(NeuronReport {
        neuron,
        dead,
        max_activation: max,
        mean_activation: mean,
        active_fraction: active,
        hits,
        dominant_class,
        purity,
    })
}

/// Top-activating rows of one neuron.
pub fn top_activating(sae: &SparseAutoencoder<f32>, acts: &ActivationSet, neuron: usize, top_n: usize) -> Result<NeuronReport> {
    neuron_report(&sae.encode(&acts.rows)?, &acts.provenance, neuron, top_n)
}

/// Reports for every neuron, ordered by class purity of the top hits, then
/// maximum activation, then index. Dead neurons come last.
pub fn rank_selective_neurons(sae: &SparseAutoencoder<f32>, acts: &ActivationSet, top_n: usize) -> Result<Vec<NeuronReport>> {
    let codes = sae.encode(&acts.rows)?;
    let mut reports = (0..sae.config.code_dim)
        .map(|j| neuron_report(&codes, &acts.provenance, j, top_n))
        .collect::<Result<Vec<_>>>()?;
    reports.sort_by(|a, b| {
        a.dead
            .cmp(&b.dead)
            .then(b.purity.total_cmp(&a.purity))
            .then(b.max_activation.total_cmp(&a.max_activation))
            .then(a.neuron.cmp(&b.neuron))
    });
    Ok(reports)
}

fn mlp_rows(model: &TstModel<f32>, sae: &SparseAutoencoder<f32>, x: &Tensor<f32>) -> Result<(Tensor<f32>, ActivationCache<f32>)> {
    let (probs, cache) = model.forward(x, ForwardMode::Eval, true)?;
    let cache = cache.expect("capture requested");
    if model.config().d_model != sae.config.input_dim {
        return Err(Error::InvalidArgument(format!(
            "SAE expects width {}, model has {}",
            sae.config.input_dim,
            model.config().d_model
        )));
    }
    Ok((probs, cache))
}

/// Code values for one instance, `[H × T]`.
pub fn activation_heatmap(model: &TstModel<f32>, sae: &SparseAutoencoder<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (_, cache) = mlp_rows(model, sae, x)?;
    sae.encode(cache.mlp_out(sae.config.layer)?)?.transpose()
}

/// CSV with header `neuron,t0,…` and one row per neuron.
pub fn heatmap_csv(heatmap: &Tensor<f32>) -> String {
    let mut out = String::from("neuron");
    for t in 0..heatmap.cols() {
        write!(out, ",t{t}").unwrap();
    }
    out.push('\n');
    for j in 0..heatmap.rows() {
        write!(out, "{j}").unwrap();
        for v in heatmap.row(j) {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteerResult {
    pub neuron: usize,
    pub gain: f32,
    pub probs_before: Vec<f32>,
    pub probs_after: Vec<f32>,
    /// `after − before` per class.
    pub delta: Vec<f32>,
}

/// Scales code `neuron` by `gain` at every timestep, decodes, and patches
/// the reconstruction into the MLP output the SAE was trained on.
pub fn sae_steer_patch(
    model: &TstModel<f32>,
    sae: &SparseAutoencoder<f32>,
    x: &Tensor<f32>,
    neuron: usize,
    gain: f32,
) -> Result<SteerResult> {
    if neuron >= sae.config.code_dim {
        return Err(Error::OutOfRange {
            what: "SAE neuron",
            index: neuron,
            limit: sae.config.code_dim,
        });
    }
    let layer = sae.config.layer;
    let (before, cache) = mlp_rows(model, sae, x)?;
    let mut z = sae.encode(cache.mlp_out(layer)?)?;
    let h = sae.config.code_dim;
    for row in z.data_mut().chunks_mut(h) {
        row[neuron] = row[neuron] * gain;
    }
    let mut donor = cache;
    donor.layers[layer].mlp_out = sae.decode(&z)?;
    let after = model.forward_with_patches(x, &donor, &[TapPoint::MlpOut { layer }])?;
    let delta = after.data().iter().zip(before.data()).map(|(a, b)| a - b).collect();
    Ok(SteerResult {
        neuron,
        gain,
        probs_before: before.into_data(),
        probs_after: after.into_data(),
        delta,
    })
}

const SAE_TENSORS: [&str; 5] = ["encoder.weight", "encoder.bias", "decoder.weight", "decoder.bias", "input_mean"];

pub fn sae_to_bytes(sae: &SparseAutoencoder<f32>) -> Result<Vec<u8>> {
    let tensors: Vec<(String, Tensor<f32>)> = SAE_TENSORS
        .iter()
        .zip([&sae.enc_w, &sae.enc_b, &sae.dec_w, &sae.dec_b, &sae.input_mean])
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    checkpoint::encode(KIND_SAE, serde_json::to_value(&sae.config)?, &tensors)
}

pub fn sae_from_bytes(bytes: &[u8]) -> Result<SparseAutoencoder<f32>> {
    let (header, tensors) = checkpoint::decode(bytes)?;
    if header.kind != KIND_SAE {
        return Err(Error::Format(format!("expected an SAE container, found `{}`", header.kind)));
    }
    let config: SaeConfig =
        serde_json::from_value(header.config).map_err(|e| Error::Format(format!("SAE config: {e}")))?;
    config.validate()?;
    if tensors.len() != SAE_TENSORS.len() || tensors.iter().zip(SAE_TENSORS).any(|((n, _), e)| n != e) {
        return Err(Error::Format("unexpected SAE tensor manifest".into()));
    }
    let (d, h) = (config.input_dim, config.code_dim);
    let shapes: [&[usize]; 5] = [&[d, h], &[h], &[h, d], &[d], &[d]];
    let mut it = tensors.into_iter().zip(shapes).map(|((name, t), s)| {
        if t.shape() == s {
            Ok(t)
        } else {
            Err(Error::Format(format!("tensor `{name}` has shape {:?}, expected {s:?}", t.shape())))
        }
    });
    let mut next = || it.next().expect("five tensors");
    Ok(SparseAutoencoder {
        enc_w: next()?,
        enc_b: next()?,
        dec_w: next()?,
        dec_b: next()?,
        input_mean: next()?,
        config,
    })
}

/// Writes an SAE checkpoint and returns its SHA-256.
pub fn save_sae(sae: &SparseAutoencoder<f32>, path: &Path) -> Result<String> {
    let bytes = sae_to_bytes(sae)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, &bytes)?;
    Ok(checkpoint::sha256_hex(&bytes))
}

pub fn load_sae(path: &Path) -> Result<SparseAutoencoder<f32>> {
    sae_from_bytes(&std::fs::read(path)?)
}

/// Warns when a λ sweep is not monotone in sparsity.
pub fn check_sparsity_trend(stats: &[(f64, SaeStats)]) -> bool {
    let ok = stats
        .windows(2)
        .all(|w| w[1].1.active_fraction <= w[0].1.active_fraction);
    if !ok {
        warn!("active fraction is not monotone in λ");
    }
    ok
}
