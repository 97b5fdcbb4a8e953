// SPDX-License-Identifier: MIT OR Apache-2.0

//! Encoder-only time-series transformer with addressable tap points.
//!
//! Layout: three conv+batchnorm+ReLU blocks (kernels 5, 3, 3; channels
//! C → d/4 → d/2 → d) with "same" padding, a learnable positional table,
//! `L` post-norm encoder layers and a max-over-time classification head.
//!
//! ## Patch sites
//!
//! Head activations are taken at the per-head *context*: the attention
//! weighted mix of values, before the output projection. Head `h` of a
//! layer owns columns `h·dh..(h+1)·dh` of the `T×d` context matrix, so
//!
//! - `Layer(ℓ)` overwrites the whole context matrix of layer ℓ,
//! - `Head(ℓ,h)` overwrites that head's `T×dh` slice,
//! - `HeadPos(ℓ,h,t)` overwrites row `t` of the slice,
//! - `MlpOut(ℓ)` overwrites the `T×d` output of the second MLP linear.
//!
//! Attention weights are computed before any overwrite, so they are
//! unaffected by patches at the same layer.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::functional::dropout_mask;
use crate::nn::rng::{SeedStreams, Stream, StreamRng};
use crate::nn::{BatchStats, Graph, Real, Tensor, Var};

/// Model hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Sequence length `T`.
    pub seq_len: usize,
    /// Input channels `C`.
    pub channels: usize,
    /// Model width `d`.
    pub d_model: usize,
    /// Encoder layers `L`.
    pub layers: usize,
    /// Attention heads `H`.
    pub heads: usize,
    /// Classes `K`.
    pub classes: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seq_len: 25,
            channels: 12,
            d_model: 64,
            layers: 3,
            heads: 8,
            classes: 9,
            mlp_hidden: 256,
            dropout: 0.1,
        }
    }
}

pub const CONV_KERNELS: [usize; 3] = [5, 3, 3];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("seq_len", self.seq_len),
            ("channels", self.channels),
            ("d_model", self.d_model),
            ("layers", self.layers),
            ("heads", self.heads),
            ("classes", self.classes),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("model config: {name} must be positive")));
        }
        if self.d_model % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "model config: d_model {} must be divisible by 4",
                self.d_model
            )));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model config: d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "model config: dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Conv channel ladder `[C, d/4, d/2, d]`.
    pub fn conv_channels(&self) -> [usize; 4] {
        [self.channels, self.d_model / 4, self.d_model / 2, self.d_model]
    }

    /// Number of trainable scalars (running batch-norm statistics excluded).
    pub fn parameter_count(&self) -> usize {
        let ch = self.conv_channels();
        let conv: usize = (0..3)
            .map(|i| ch[i + 1] * ch[i] * CONV_KERNELS[i] + ch[i + 1] + 2 * ch[i + 1])
            .sum();
        let d = self.d_model;
        let attn = 4 * (d * d + d);
        let mlp = d * self.mlp_hidden + self.mlp_hidden + self.mlp_hidden * d + d;
        let norms = 4 * d;
        conv + self.seq_len * d + self.layers * (attn + mlp + norms) + d * self.classes + self.classes
    }
}

/// Address of an internal activation. Indices are zero-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TapPoint {
    Layer { layer: usize },
    Head { layer: usize, head: usize },
    HeadPos { layer: usize, head: usize, t: usize },
    MlpOut { layer: usize },
}

impl TapPoint {
    pub fn layer(&self) -> usize {
        match *self {
            TapPoint::Layer { layer }
            | TapPoint::Head { layer, .. }
            | TapPoint::HeadPos { layer, .. }
            | TapPoint::MlpOut { layer } => layer,
        }
    }

    pub fn head(&self) -> Option<usize> {
        match *self {
            TapPoint::Head { head, .. } | TapPoint::HeadPos { head, .. } => Some(head),
            _ => None,
        }
    }

    pub fn position(&self) -> Option<usize> {
        match *self {
            TapPoint::HeadPos { t, .. } => Some(t),
            _ => None,
        }
    }

    /// Lexicographic `(ℓ, h, t)` key used to break ranking ties; absent
    /// indices sort first.
    pub fn index_key(&self) -> (usize, usize, usize) {
        (
            self.layer(),
            self.head().map_or(0, |h| h + 1),
            self.position().map_or(0, |t| t + 1),
        )
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let check = |what, index, limit| {
            if index >= limit {
                Err(Error::OutOfRange { what, index, limit })
            } else {
                Ok(())
            }
        };
        check("layer", self.layer(), cfg.layers)?;
        if let Some(h) = self.head() {
            check("head", h, cfg.heads)?;
        }
        if let Some(t) = self.position() {
            check("timestep", t, cfg.seq_len)?;
        }
        Ok(())
    }

    /// Short label such as `L0`, `L0H6`, `L0H6T21`, `L0MLP`.
    pub fn label(&self) -> String {
        match *self {
            TapPoint::Layer { layer } => format!("L{layer}"),
            TapPoint::Head { layer, head } => format!("L{layer}H{head}"),
            TapPoint::HeadPos { layer, head, t } => format!("L{layer}H{head}T{t}"),
            TapPoint::MlpOut { layer } => format!("L{layer}MLP"),
        }
    }
}

/// Activations captured at one encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache<F = f32> {
    /// Per-head context, each `[T × dh]`.
    pub head_context: Vec<Tensor<F>>,
    /// Per-head attention probabilities, each `[T × T]`, rows = queries.
    pub attention: Vec<Tensor<F>>,
    /// Output of the second MLP linear, `[T × d]`.
    pub mlp_out: Tensor<F>,
}

/// Everything captured during one forward pass of one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationCache<F = f32> {
    pub config: ModelConfig,
    pub layers: Vec<LayerCache<F>>,
}

impl<F: Real> ActivationCache<F> {
    fn layer(&self, layer: usize) -> Result<&LayerCache<F>> {
        self.layers.get(layer).ok_or(Error::OutOfRange {
            what: "cached layer",
            index: layer,
            limit: self.layers.len(),
        })
    }

    pub fn attention(&self, layer: usize, head: usize) -> Result<&Tensor<F>> {
        let l = self.layer(layer)?;
        l.attention.get(head).ok_or(Error::OutOfRange {
            what: "cached head",
            index: head,
            limit: l.attention.len(),
        })
    }

    pub fn head_context(&self, layer: usize, head: usize) -> Result<&Tensor<F>> {
        let l = self.layer(layer)?;
        l.head_context.get(head).ok_or(Error::OutOfRange {
            what: "cached head",
            index: head,
            limit: l.head_context.len(),
        })
    }

    pub fn mlp_out(&self, layer: usize) -> Result<&Tensor<F>> {
        Ok(&self.layer(layer)?.mlp_out)
    }

    /// Re-assembles the `[T × d]` context matrix of a layer.
    pub fn context_matrix(&self, layer: usize) -> Result<Vec<F>> {
        let cfg = &self.config;
        let (t, dh, d) = (cfg.seq_len, cfg.head_dim(), cfg.d_model);
        let l = self.layer(layer)?;
        let mut out = vec![F::zero(); t * d];
        for (h, ctx) in l.head_context.iter().enumerate() {
            for ti in 0..t {
                out[ti * d + h * dh..ti * d + (h + 1) * dh].copy_from_slice(ctx.row(ti));
            }
        }
        Ok(out)
    }
}

macro_rules! weight_group {
    ($(#[$meta:meta])* $name:ident { $($field:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<P> {
            $(pub $field: P,)+
        }

        impl<P> $name<P> {
            fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> $name<Q> {
                $name { $($field: f(&self.$field),)+ }
            }

            fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
                $(out.push((format!("{prefix}.{}", stringify!($field)), &self.$field));)+
            }

            fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut P)>) {
                $(out.push((format!("{prefix}.{}", stringify!($field)), &mut self.$field));)+
            }
        }
    };
}

weight_group!(
    /// Conv + batch-norm affine parameters of one front-end block.
    ConvBlock { weight, bias, gamma, beta }
);

weight_group!(
    /// One post-norm encoder layer. Projection matrices are `[in × out]`.
    EncoderLayer {
        wq, bq, wk, bk, wv, bv, wo, bo,
        ln1_gamma, ln1_beta,
        w1, b1, w2, b2,
        ln2_gamma, ln2_beta,
    }
);

/// All trainable parameters, generic over the slot type so the same
/// structure holds tensors, tape handles or gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<P> {
    pub conv: Vec<ConvBlock<P>>,
    pub pos_embedding: P,
    pub layers: Vec<EncoderLayer<P>>,
    pub head_w: P,
    pub head_b: P,
}

impl<P> Weights<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> Weights<Q> {
        Weights {
            conv: self.conv.iter().map(|c| c.map(&mut f)).collect(),
            pos_embedding: f(&self.pos_embedding),
            layers: self.layers.iter().map(|l| l.map(&mut f)).collect(),
            head_w: f(&self.head_w),
            head_b: f(&self.head_b),
        }
    }

    /// `(name, slot)` pairs in canonical order.
    pub fn entries(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        for (i, c) in self.conv.iter().enumerate() {
            c.collect(&format!("conv.{i}"), &mut out);
        }
        out.push(("pos_embedding".into(), &self.pos_embedding));
        for (i, l) in self.layers.iter().enumerate() {
            l.collect(&format!("layers.{i}"), &mut out);
        }
        out.push(("head.weight".into(), &self.head_w));
        out.push(("head.bias".into(), &self.head_b));
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(String, &mut P)> {
        let mut out = Vec::new();
        for (i, c) in self.conv.iter_mut().enumerate() {
            c.collect_mut(&format!("conv.{i}"), &mut out);
        }
        out.push(("pos_embedding".into(), &mut self.pos_embedding));
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.collect_mut(&format!("layers.{i}"), &mut out);
        }
        out.push(("head.weight".into(), &mut self.head_w));
        out.push(("head.bias".into(), &mut self.head_b));
        out
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<F = f32> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

impl<F: Real> RunningStats<F> {
    fn new(channels: usize) -> Self {
        Self {
            mean: vec![F::zero(); channels],
            var: vec![F::one(); channels],
        }
    }

    fn update(&mut self, stats: &BatchStats<F>) {
        let mom = F::lit(BATCH_NORM_MOMENTUM);
        let one = F::one();
        let unbias = if stats.count > 1 {
            F::from_usize(stats.count).unwrap() / F::from_usize(stats.count - 1).unwrap()
        } else {
            one
        };
        for c in 0..self.mean.len() {
            self.mean[c] = (one - mom) * self.mean[c] + mom * stats.mean[c];
            self.var[c] = (one - mom) * self.var[c] + mom * stats.var[c] * unbias;
        }
    }
}

/// How a forward pass treats batch norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    /// Running statistics, no dropout. Deterministic and side-effect free.
    Eval,
    /// Batch statistics and dropout with masks drawn from `dropout_seed`.
    /// Running statistics are not updated.
    Train { dropout_seed: u64 },
}

/// Result of one training-mode loss evaluation.
pub struct LossAndGrads<F> {
    pub loss: F,
    pub grads: Weights<Vec<F>>,
    pub batch_stats: Vec<BatchStats<F>>,
}

/// Overwrites applied during a patched forward pass, compiled per layer.
struct PatchPlan<F> {
    context: Vec<Option<(Vec<F>, Vec<bool>)>>,
    mlp_out: Vec<Option<Vec<F>>>,
}

struct Trace<F> {
    logits: Var,
    contexts: Vec<Var>,
    attention: Vec<Tensor<F>>,
    mlp_out: Vec<Var>,
    batch_stats: Vec<BatchStats<F>>,
}

enum Dropout<'a> {
    Off,
    On(&'a mut StreamRng),
}

/// The classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct TstModel<F: Real = f32> {
    config: ModelConfig,
    pub weights: Weights<Tensor<F>>,
    pub running: Vec<RunningStats<F>>,
}

fn uniform<F: Real>(shape: &[usize], bound: f64, rng: &mut StreamRng) -> Tensor<F> {
    let n = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..n).map(|_| F::lit(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

impl<F: Real> TstModel<F> {
    /// Fresh model with weights drawn from the init stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeedStreams::new(seed).stream(Stream::Init);
        let ch = config.conv_channels();
        let conv = (0..3)
            .map(|i| {
                let fan_in = (ch[i] * CONV_KERNELS[i]) as f64;
                let bound = 1.0 / fan_in.sqrt();
                ConvBlock {
                    weight: uniform(&[ch[i + 1], ch[i], CONV_KERNELS[i]], bound, &mut rng),
                    bias: uniform(&[ch[i + 1]], bound, &mut rng),
                    gamma: Tensor::full(&[ch[i + 1]], F::one()),
                    beta: Tensor::zeros(&[ch[i + 1]]),
                }
            })
            .collect();
        let d = config.d_model;
        let normal = Normal::new(0.0, 0.02).expect("valid sigma");
        let pos = (0..config.seq_len * d).map(|_| F::lit(normal.sample(&mut rng))).collect();
        let pos_embedding = Tensor::new(&[config.seq_len, d], pos)?;
        let xavier = (6.0 / (2 * d) as f64).sqrt();
        let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let layers = (0..config.layers)
            .map(|_| EncoderLayer {
                wq: uniform(&[d, d], xavier, &mut rng),
                bq: Tensor::zeros(&[d]),
                wk: uniform(&[d, d], xavier, &mut rng),
                bk: Tensor::zeros(&[d]),
                wv: uniform(&[d, d], xavier, &mut rng),
                bv: Tensor::zeros(&[d]),
                wo: uniform(&[d, d], lin(d), &mut rng),
                bo: Tensor::zeros(&[d]),
                ln1_gamma: Tensor::full(&[d], F::one()),
                ln1_beta: Tensor::zeros(&[d]),
                w1: uniform(&[d, config.mlp_hidden], lin(d), &mut rng),
                b1: uniform(&[config.mlp_hidden], lin(d), &mut rng),
                w2: uniform(&[config.mlp_hidden, d], lin(config.mlp_hidden), &mut rng),
                b2: uniform(&[d], lin(config.mlp_hidden), &mut rng),
                ln2_gamma: Tensor::full(&[d], F::one()),
                ln2_beta: Tensor::zeros(&[d]),
            })
            .collect();
        let head_w = uniform(&[d, config.classes], lin(d), &mut rng);
        let head_b = uniform(&[config.classes], lin(d), &mut rng);
        let running = ch[1..].iter().map(|&c| RunningStats::new(c)).collect();
        Ok(Self {
            config,
            weights: Weights {
                conv,
                pos_embedding,
                layers,
                head_w,
                head_b,
            },
            running,
        })
    }

    /// Assembles a model from parts, checking every shape against `config`.
    pub fn from_parts(config: ModelConfig, weights: Weights<Tensor<F>>, running: Vec<RunningStats<F>>) -> Result<Self> {
        config.validate()?;
        let reference = TstModel::<F>::new(config.clone(), 0)?;
        let expected = reference.weights.entries();
        let actual = weights.entries();
        if expected.len() != actual.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((en, et), (an, at)) in expected.iter().zip(&actual) {
            if en != an || et.shape() != at.shape() {
                return Err(Error::Shape {
                    op: "TstModel::from_parts",
                    expected: et.shape().to_vec(),
                    actual: at.shape().to_vec(),
                });
            }
        }
        let ch = config.conv_channels();
        if running.len() != 3
            || running
                .iter()
                .zip(&ch[1..])
                .any(|(r, &c)| r.mean.len() != c || r.var.len() != c)
        {
            return Err(Error::Format("batch-norm running statistics do not match config".into()));
        }
        Ok(Self {
            config,
            weights,
            running,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.entries().iter().map(|(_, t)| t.len()).sum()
    }

    /// Converts every tensor to another float type.
    pub fn cast<G: Real>(&self) -> TstModel<G> {
        TstModel {
            config: self.config.clone(),
            weights: self.weights.map(|t| t.cast()),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    mean: r.mean.iter().map(|&v| G::lit(v.to_f64().unwrap())).collect(),
                    var: r.var.iter().map(|&v| G::lit(v.to_f64().unwrap())).collect(),
                })
                .collect(),
        }
    }

    fn check_input(&self, x: &Tensor<F>) -> Result<()> {
        let expected = [self.config.channels, self.config.seq_len];
        if x.shape() != expected {
            return Err(shape_err("model input", &expected, x.shape()));
        }
        Ok(())
    }

    /// Stacks `C×T` instances into `(B·T)×C` rows.
    fn input_rows(&self, xs: &[&Tensor<F>]) -> Result<Tensor<F>> {
        let (c, t) = (self.config.channels, self.config.seq_len);
        let mut rows = Vec::with_capacity(xs.len() * c * t);
        for x in xs {
            self.check_input(x)?;
            let d = x.data();
            for ti in 0..t {
                for ci in 0..c {
                    rows.push(d[ci * t + ti]);
                }
            }
        }
        Tensor::new(&[xs.len() * t, c], rows)
    }

    fn build(
        &self,
        g: &mut Graph<F>,
        w: &Weights<Var>,
        xs: &[&Tensor<F>],
        train_norm: bool,
        mut dropout: Dropout<'_>,
        patches: Option<&PatchPlan<F>>,
    ) -> Result<Trace<F>> {
        let cfg = &self.config;
        let t = cfg.seq_len;
        let p = cfg.dropout;
        let mut x = g.leaf(self.input_rows(xs)?);
        let mut batch_stats = Vec::new();
        for (i, blk) in w.conv.iter().enumerate() {
            x = g.conv1d(x, blk.weight, blk.bias, t)?;
            x = if train_norm {
                let (y, stats) = g.batch_norm_train(x, blk.gamma, blk.beta)?;
                batch_stats.push(stats);
                y
            } else {
                let r = &self.running[i];
                g.batch_norm_eval(x, blk.gamma, blk.beta, &r.mean, &r.var)?
            };
            x = g.relu(x);
        }
        x = g.add_positional(x, w.pos_embedding, t)?;

        let mut apply_dropout = |g: &mut Graph<F>, v: Var| -> Result<Var> {
            match &mut dropout {
                Dropout::On(rng) if p > 0.0 => {
                    let mask = dropout_mask(g.value(v).len(), p, &mut **rng);
                    g.mask_scale(v, mask)
                }
                _ => Ok(v),
            }
        };

        let mut contexts = Vec::with_capacity(cfg.layers);
        let mut attention = Vec::with_capacity(cfg.layers);
        let mut mlp_outs = Vec::with_capacity(cfg.layers);
        for (li, lw) in w.layers.iter().enumerate() {
            let q = g.linear(x, lw.wq, lw.bq)?;
            let k = g.linear(x, lw.wk, lw.bk)?;
            let v = g.linear(x, lw.wv, lw.bv)?;
            let (mut ctx, probs) = g.attention(q, k, v, t, cfg.heads)?;
            contexts.push(ctx);
            attention.push(probs);
            if let Some((donor, mask)) = patches.and_then(|pp| pp.context[li].as_ref()) {
                ctx = g.overwrite(ctx, donor, mask.clone())?;
            }
            let mut a = g.linear(ctx, lw.wo, lw.bo)?;
            a = apply_dropout(g, a)?;
            let res = g.add(x, a)?;
            x = g.layer_norm(res, lw.ln1_gamma, lw.ln1_beta)?;

            let mut h = g.linear(x, lw.w1, lw.b1)?;
            h = g.relu(h);
            h = apply_dropout(g, h)?;
            let mut m = g.linear(h, lw.w2, lw.b2)?;
            mlp_outs.push(m);
            if let Some(donor) = patches.and_then(|pp| pp.mlp_out[li].as_ref()) {
                m = g.overwrite(m, donor, vec![true; donor.len()])?;
            }
            m = apply_dropout(g, m)?;
            let res = g.add(x, m)?;
            x = g.layer_norm(res, lw.ln2_gamma, lw.ln2_beta)?;
        }
        let pooled = g.max_pool_time(x, t)?;
        let logits = g.linear(pooled, w.head_w, w.head_b)?;
        Ok(Trace {
            logits,
            contexts,
            attention,
            mlp_out: mlp_outs,
            batch_stats,
        })
    }

    fn bind(&self, g: &mut Graph<F>) -> Weights<Var> {
        self.weights.map(|t| g.leaf(t.clone()))
    }

    fn capture(&self, g: &Graph<F>, trace: &Trace<F>) -> Result<ActivationCache<F>> {
        let cfg = &self.config;
        let (t, dh, d) = (cfg.seq_len, cfg.head_dim(), cfg.d_model);
        let mut layers = Vec::with_capacity(cfg.layers);
        for li in 0..cfg.layers {
            let ctx = g.value(trace.contexts[li]).data();
            let probs = trace.attention[li].data();
            let mut head_context = Vec::with_capacity(cfg.heads);
            let mut attn = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let mut slice = Vec::with_capacity(t * dh);
                for ti in 0..t {
                    slice.extend_from_slice(&ctx[ti * d + h * dh..ti * d + (h + 1) * dh]);
                }
                head_context.push(Tensor::new(&[t, dh], slice)?);
                attn.push(Tensor::new(&[t, t], probs[h * t * t..(h + 1) * t * t].to_vec())?);
            }
            layers.push(LayerCache {
                head_context,
                attention: attn,
                mlp_out: g.value(trace.mlp_out[li]).clone(),
            });
        }
        Ok(ActivationCache {
            config: cfg.clone(),
            layers,
        })
    }

    fn probs_of(&self, g: &mut Graph<F>, logits: Var) -> Tensor<F> {
        let p = g.softmax(logits);
        let k = self.config.classes;
        Tensor::new(&[k], g.value(p).data().to_vec()).expect("single instance")
    }

    /// Class probabilities for one `C×T` instance, optionally capturing
    /// every tap point.
    pub fn forward(&self, x: &Tensor<F>, mode: ForwardMode, capture: bool) -> Result<(Tensor<F>, Option<ActivationCache<F>>)> {
        let mut g = Graph::new();
        let w = self.bind(&mut g);
        let trace = match mode {
            ForwardMode::Eval => self.build(&mut g, &w, &[x], false, Dropout::Off, None)?,
            ForwardMode::Train { dropout_seed } => {
                let mut rng = SeedStreams::new(dropout_seed).stream(Stream::Dropout);
                self.build(&mut g, &w, &[x], true, Dropout::On(&mut rng), None)?
            }
        };
        let cache = if capture { Some(self.capture(&g, &trace)?) } else { None };
        Ok((self.probs_of(&mut g, trace.logits), cache))
    }

    /// Eval-mode class probabilities for a batch of instances, one row per
    /// instance. Row `i` is bit-identical to `forward(xs[i])`.
    pub fn predict_batch(&self, xs: &[&Tensor<F>]) -> Result<Tensor<F>> {
        if xs.is_empty() {
            return Ok(Tensor::zeros(&[0, self.config.classes]));
        }
        let mut g = Graph::new();
        let w = self.bind(&mut g);
        let trace = self.build(&mut g, &w, xs, false, Dropout::Off, None)?;
        let p = g.softmax(trace.logits);
        Ok(g.value(p).clone())
    }

    fn compile_patches(&self, donor: &ActivationCache<F>, targets: &[TapPoint]) -> Result<PatchPlan<F>> {
        let cfg = &self.config;
        if donor.config != *cfg {
            return Err(Error::InvalidArgument(
                "donor cache was produced by a model with a different config".into(),
            ));
        }
        let (t, dh, d) = (cfg.seq_len, cfg.head_dim(), cfg.d_model);
        let mut plan = PatchPlan {
            context: (0..cfg.layers).map(|_| None).collect(),
            mlp_out: (0..cfg.layers).map(|_| None).collect(),
        };
        for tp in targets {
            tp.validate(cfg)?;
            let li = tp.layer();
            if let TapPoint::MlpOut { .. } = tp {
                plan.mlp_out[li] = Some(donor.mlp_out(li)?.data().to_vec());
                continue;
            }
            let (_, mask) = match &mut plan.context[li] {
                Some(entry) => entry,
                slot @ None => slot.insert((donor.context_matrix(li)?, vec![false; t * d])),
            };
            let (rows, cols) = match *tp {
                TapPoint::Layer { .. } => (0..t, 0..d),
                TapPoint::Head { head, .. } => (0..t, head * dh..(head + 1) * dh),
                TapPoint::HeadPos { head, t: ti, .. } => (ti..ti + 1, head * dh..(head + 1) * dh),
                TapPoint::MlpOut { .. } => unreachable!(),
            };
            for r in rows {
                for c in cols.clone() {
                    mask[r * d + c] = true;
                }
            }
        }
        Ok(plan)
    }

    /// Eval-mode forward of `x` with the activations at every target
    /// replaced by the donor's. Multiple targets apply simultaneously.
    /// An empty target set is the plain forward pass.
    pub fn forward_with_patches(&self, x: &Tensor<F>, donor: &ActivationCache<F>, targets: &[TapPoint]) -> Result<Tensor<F>> {
        let plan = self.compile_patches(donor, targets)?;
        let mut g = Graph::new();
        let w = self.bind(&mut g);
        let trace = self.build(&mut g, &w, &[x], false, Dropout::Off, Some(&plan))?;
        Ok(self.probs_of(&mut g, trace.logits))
    }

    /// Train-mode loss on a batch and its gradient for every parameter.
    /// Dropout masks come from `dropout_rng` (no dropout when `None`).
    pub fn loss_and_grads(&self, xs: &[&Tensor<F>], labels: &[usize], dropout_rng: Option<&mut StreamRng>) -> Result<LossAndGrads<F>> {
        let mut g = Graph::new();
        let w = self.bind(&mut g);
        let drop = match dropout_rng {
            Some(r) => Dropout::On(r),
            None => Dropout::Off,
        };
        let trace = self.build(&mut g, &w, xs, true, drop, None)?;
        let loss = g.cross_entropy(trace.logits, labels)?;
        let grads = g.backward(loss)?;
        let grad_w = w.map(|v| grads.get_or_zeros(*v, g.value(*v).len()));
        Ok(LossAndGrads {
            loss: g.value(loss).data()[0],
            grads: grad_w,
            batch_stats: trace.batch_stats,
        })
    }

    /// Train-mode loss only (same masks as [`Self::loss_and_grads`] for the
    /// same rng state). Used by finite-difference checks.
    pub fn loss(&self, xs: &[&Tensor<F>], labels: &[usize], dropout_rng: Option<&mut StreamRng>) -> Result<F> {
        let mut g = Graph::new();
        let w = self.bind(&mut g);
        let drop = match dropout_rng {
            Some(r) => Dropout::On(r),
            None => Dropout::Off,
        };
        let trace = self.build(&mut g, &w, xs, true, drop, None)?;
        let loss = g.cross_entropy(trace.logits, labels)?;
        Ok(g.value(loss).data()[0])
    }

    /// Stores gradients on the parameter tensors.
    pub fn set_grads(&mut self, grads: Weights<Vec<F>>) -> Result<()> {
        for ((_, p), (_, gr)) in self.weights.entries_mut().into_iter().zip(grads.entries()) {
            p.set_grad(gr.clone())?;
        }
        Ok(())
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<F>]) {
        for (r, s) in self.running.iter_mut().zip(stats) {
            r.update(s);
        }
    }

    /// Mutable `(name, tensor)` pairs for the optimizer.
    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        self.weights.entries_mut()
    }

    /// Parameters plus batch-norm buffers, in checkpoint order.
    pub fn named_tensors(&self) -> Result<Vec<(String, Tensor<F>)>> {
        let mut out: Vec<(String, Tensor<F>)> = self
            .weights
            .entries()
            .into_iter()
            .map(|(n, t)| {
                let mut t = t.clone();
                t.clear_grad();
                (n, t)
            })
            .collect();
        for (i, r) in self.running.iter().enumerate() {
            out.push((format!("conv.{i}.running_mean"), Tensor::new(&[r.mean.len()], r.mean.clone())?));
            out.push((format!("conv.{i}.running_var"), Tensor::new(&[r.var.len()], r.var.clone())?));
        }
        Ok(out)
    }

    /// Inverse of [`Self::named_tensors`].
    pub fn from_named_tensors(config: ModelConfig, tensors: Vec<(String, Tensor<F>)>) -> Result<Self> {
        let mut model = TstModel::<F>::new(config.clone(), 0)?;
        let mut map: std::collections::HashMap<String, Tensor<F>> = tensors.into_iter().collect();
        for (name, slot) in model.weights.entries_mut() {
            let t = map
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Shape {
                    op: "load tensor",
                    expected: slot.shape().to_vec(),
                    actual: t.shape().to_vec(),
                });
            }
            *slot = t;
        }
        for (i, r) in model.running.iter_mut().enumerate() {
            for (suffix, dst) in [("running_mean", &mut r.mean), ("running_var", &mut r.var)] {
                let name = format!("conv.{i}.{suffix}");
                let t = map
                    .remove(&name)
                    .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
                if t.len() != dst.len() {
                    return Err(shape_err("load tensor", &[dst.len()], t.shape()));
                }
                *dst = t.into_data();
            }
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Format(format!("unexpected tensor `{extra}`")));
        }
        Ok(model)
    }
}

/// Draws a random `C×T` input for tests and fixtures.
pub fn random_input<F: Real, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Tensor<F> {
    let n = cfg.channels * cfg.seq_len;
    let data = (0..n).map(|_| F::lit(rng.random::<f64>() * 2.0 - 1.0)).collect();
    Tensor::new(&[cfg.channels, cfg.seq_len], data).expect("shape")
}
