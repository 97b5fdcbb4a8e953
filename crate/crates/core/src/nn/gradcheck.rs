// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode gradients against central finite differences in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{random_input, ModelConfig, TstModel};
use crate::nn::rng::{SeedStreams, Stream};
use crate::nn::{Graph, Tensor, Var};

/// Step for single primitives.
pub const STEP: f64 = 1e-6;
/// Steps tried for the whole model. Small steps lose parameters with an
/// exactly-zero gradient (conv biases feeding batch norm) to rounding in
/// the loss; large steps can straddle a ReLU or max-pool kink. An element
/// passes when any step agrees, which a wrong gradient cannot do.
pub const MODEL_STEPS: [f64; 3] = [1e-6, 1e-5, 1e-4];
/// Denominator floor for the relative error.
pub const FLOOR: f64 = 1e-8;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Largest disagreement found by one check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// `(input, element, analytic, numeric)` at the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
    pub elements: usize,
}

impl GradCheck {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            max_rel_err: 0.0,
            worst: None,
            elements: 0,
        }
    }

    fn observe(&mut self, input: &str, j: usize, analytic: f64, numeric: f64, e: f64) {
        self.elements += 1;
        if e > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = Some((input.to_string(), j, analytic, numeric));
        }
    }
}

/// Builds a scalar from the leaves on a fresh tape.
pub type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

fn min_over_steps(steps: &[f64], analytic: f64, mut eval: impl FnMut(f64) -> Result<f64>) -> Result<(f64, f64)> {
    let mut best = (f64::INFINITY, f64::NAN);
    for &h in steps {
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        let e = rel_err(analytic, numeric);
        if e < best.0 {
            best = (e, numeric);
        }
    }
    Ok(best)
}

/// Checks every element of every input of `build`.
pub fn check_fn(name: &str, inputs: &[Tensor<f64>], steps: &[f64], build: &Build) -> Result<GradCheck> {
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::InvalidArgument(format!("{name}: output is not a scalar")));
    }
    let grads = g.backward(out)?;
    let mut report = GradCheck::new(name);
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, inputs[i].len());
        for (j, &a) in analytic.iter().enumerate() {
            let (e, numeric) = min_over_steps(steps, a, |h| {
                let mut moved = inputs.to_vec();
                moved[i].data_mut()[j] += h;
                eval(&moved)
            })?;
            report.observe(&format!("input {i}"), j, a, numeric, e);
        }
    }
    Ok(report)
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).expect("shape matches data")
}

/// Reduces a tensor output to a scalar with fixed random weights so every
/// output element reaches the gradient.
fn reduce(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let w = (0..g.value(x).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    g.weighted_sum(x, w)
}

/// Every differentiable primitive on small random inputs.
pub fn primitive_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut r = SeedStreams::new(seed).stream(Stream::Fixture);
    let s = &[STEP];
    let mut out = Vec::new();

    let a = rand_t(&mut r, &[4, 3]);
    let b = rand_t(&mut r, &[3, 5]);
    let bias = rand_t(&mut r, &[5]);
    out.push(check_fn("linear", &[a.clone(), b, bias], s, &|g, v| {
        let y = g.linear(v[0], v[1], v[2])?;
        reduce(g, y, seed)
    })?);
    let c = rand_t(&mut r, &[4, 3]);
    out.push(check_fn("add/sub/scale", &[a.clone(), c], s, &|g, v| {
        let y = g.add(v[0], v[1])?;
        let y = g.sub(y, v[1])?;
        let y = g.sub(y, v[1])?;
        let y = g.scale(y, -0.7);
        reduce(g, y, seed)
    })?);
    out.push(check_fn("relu", &[a.clone()], s, &|g, v| {
        let y = g.relu(v[0]);
        reduce(g, y, seed)
    })?);
    out.push(check_fn("sum_squares/abs_sum", &[a.clone()], s, &|g, v| {
        let q = g.sum_squares(v[0]);
        let l = g.abs_sum(v[0]);
        let l = g.scale(l, 0.3);
        g.add(q, l)
    })?);
    let mask: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 1.25 }).collect();
    out.push(check_fn("mask_scale", &[a.clone()], s, &|g, v| {
        let y = g.mask_scale(v[0], mask.clone())?;
        reduce(g, y, seed)
    })?);
    let donor: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
    let keep: Vec<bool> = (0..12).map(|i| i % 4 == 1).collect();
    out.push(check_fn("overwrite", &[a.clone()], s, &|g, v| {
        let y = g.overwrite(v[0], &donor, keep.clone())?;
        Ok(g.sum_squares(y))
    })?);
    let pos = rand_t(&mut r, &[2, 3]);
    out.push(check_fn("add_positional", &[a, pos], s, &|g, v| {
        let y = g.add_positional(v[0], v[1], 2)?;
        reduce(g, y, seed)
    })?);

    let x = rand_t(&mut r, &[6, 5]);
    let gamma = rand_t(&mut r, &[5]);
    let beta = rand_t(&mut r, &[5]);
    out.push(check_fn("layer_norm", &[x.clone(), gamma.clone(), beta.clone()], s, &|g, v| {
        let y = g.layer_norm(v[0], v[1], v[2])?;
        reduce(g, y, seed)
    })?);
    out.push(check_fn("batch_norm_train", &[x.clone(), gamma.clone(), beta.clone()], s, &|g, v| {
        let (y, _) = g.batch_norm_train(v[0], v[1], v[2])?;
        reduce(g, y, seed)
    })?);
    let rm: Vec<f64> = (0..5).map(|i| i as f64 * 0.1).collect();
    let rv: Vec<f64> = (0..5).map(|i| 0.5 + i as f64 * 0.2).collect();
    out.push(check_fn("batch_norm_eval", &[x, gamma, beta], s, &|g, v| {
        let y = g.batch_norm_eval(v[0], v[1], v[2], &rm, &rv)?;
        reduce(g, y, seed)
    })?);

    // two sequences of length 6, 3 → 4 channels
    let x = rand_t(&mut r, &[12, 3]);
    for k in [1, 3, 5] {
        let w = rand_t(&mut r, &[4, 3, k]);
        let b = rand_t(&mut r, &[4]);
        out.push(check_fn(&format!("conv1d k={k}"), &[x.clone(), w, b], s, &|g, v| {
            let y = g.conv1d(v[0], v[1], v[2], 6)?;
            reduce(g, y, seed)
        })?);
    }
    out.push(check_fn("max_pool_time", &[x.clone()], s, &|g, v| {
        let y = g.max_pool_time(v[0], 6)?;
        reduce(g, y, seed)
    })?);
    out.push(check_fn("softmax", &[x], s, &|g, v| {
        let y = g.softmax(v[0]);
        reduce(g, y, seed)
    })?);
    let logits = rand_t(&mut r, &[4, 3]);
    out.push(check_fn("cross_entropy", &[logits], s, &|g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]))?);
    let q = rand_t(&mut r, &[12, 8]);
    let k = rand_t(&mut r, &[12, 8]);
    let vv = rand_t(&mut r, &[12, 8]);
    out.push(check_fn("attention", &[q, k, vv], s, &|g, v| {
        let (y, _) = g.attention(v[0], v[1], v[2], 6, 2)?;
        reduce(g, y, seed)
    })?);
    Ok(out)
}

/// Small model used for the whole-network check.
pub fn reduced_config() -> ModelConfig {
    ModelConfig {
        seq_len: 6,
        channels: 3,
        d_model: 8,
        layers: 2,
        heads: 2,
        classes: 3,
        mlp_hidden: 16,
        dropout: 0.1,
    }
}

/// Training-mode loss of a freshly initialised model (dropout and batch
/// statistics active) against every parameter.
pub fn model_loss_check(cfg: &ModelConfig, seed: u64) -> Result<GradCheck> {
    let model = TstModel::<f64>::new(cfg.clone(), seed)?;
    let streams = SeedStreams::new(seed);
    let mut r = streams.stream(Stream::Fixture);
    let xs: Vec<Tensor<f64>> = (0..3).map(|_| random_input(cfg, &mut r)).collect();
    let refs: Vec<&Tensor<f64>> = xs.iter().collect();
    let labels: Vec<usize> = (0..xs.len()).map(|i| (i * 2) % cfg.classes).collect();
    let dropout = streams.stream(Stream::Dropout);
    let out = model.loss_and_grads(&refs, &labels, Some(&mut dropout.clone()))?;
    let mut report = GradCheck::new("model loss");
    for (name, grad) in out.grads.entries() {
        for (j, &a) in grad.iter().enumerate() {
            let (e, numeric) = min_over_steps(&MODEL_STEPS, a, |h| {
                let mut m = model.clone();
                for (n, t) in m.weights.entries_mut() {
                    if n == name {
                        t.data_mut()[j] += h;
                    }
                }
                m.loss(&refs, &labels, Some(&mut dropout.clone()))
            })?;
            report.observe(&name, j, a, numeric, e);
        }
    }
    Ok(report)
}
