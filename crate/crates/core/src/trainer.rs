// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training loop, evaluation and clean/corrupt pair selection.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, TimeSeriesInstance};
use crate::error::{Error, Result};
use crate::model::TstModel;
use crate::nn::rng::{SeedStreams, Stream};
use crate::nn::{RAdam, RAdamConfig, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid train config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean train-mode loss over the epoch's batches.
    pub train_loss: f64,
    pub test_acc: f64,
}

pub struct TrainOutcome {
    pub model: TstModel<f32>,
    pub log: Vec<EpochMetrics>,
}

/// Trains with RAdam on shuffled mini-batches for a fixed number of epochs
/// and returns the last-epoch weights. `on_epoch` observes progress.
pub fn train(
    mut model: TstModel<f32>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::InvalidArgument("empty train split".into()));
    }
    let streams = SeedStreams::new(cfg.seed);
    let mut shuffle_rng = streams.stream(Stream::Shuffle);
    let mut dropout_rng = streams.stream(Stream::Dropout);
    let mut opt = RAdam::<f32>::new(RAdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..RAdamConfig::default()
    });
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let xs: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &dataset.train[i].values).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.train[i].label).collect();
            let out = model.loss_and_grads(&xs, &labels, Some(&mut dropout_rng))?;
            if !out.loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, step {step}"
                )));
            }
            model.set_grads(out.grads)?;
            model.update_running_stats(&out.batch_stats);
            let mut params = model.parameters_mut();
            let mut refs: Vec<(&str, &mut Tensor<f32>)> =
                params.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
            opt.step(&mut refs)?;
            loss_sum += out.loss as f64;
            batches += 1;
        }
        let test_acc = if dataset.test.is_empty() {
            f64::NAN
        } else {
            evaluate(&model, &dataset.test, dataset.classes())?.accuracy
        };
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / batches as f64,
            test_acc,
        };
        on_epoch(&m);
        log.push(m);
    }
    for (_, p) in model.parameters_mut() {
        p.clear_grad();
    }
    Ok(TrainOutcome { model, log })
}

/// Eval-mode class probabilities for every instance, in order.
pub fn predict_all(model: &TstModel<f32>, instances: &[TimeSeriesInstance]) -> Result<Vec<Vec<f32>>> {
    let chunks: Vec<Result<Vec<Vec<f32>>>> = instances
        .par_chunks(32)
        .map(|chunk| {
            let xs: Vec<&Tensor<f32>> = chunk.iter().map(|i| &i.values).collect();
            let probs = model.predict_batch(&xs)?;
            Ok((0..chunk.len()).map(|r| probs.row(r).to_vec()).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(instances.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub total: usize,
}

/// Accuracy and confusion matrix from label/prediction pairs.
pub fn confusion_from_predictions(labels: &[usize], predicted: &[usize], classes: usize) -> Result<Evaluation> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty split".into()));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&y, &p) in labels.iter().zip(predicted) {
        if y >= classes || p >= classes {
            return Err(Error::OutOfRange {
                what: "class",
                index: y.max(p),
                limit: classes,
            });
        }
        confusion[y][p] += 1;
    }
    let correct: usize = (0..classes).map(|k| confusion[k][k]).sum();
    Ok(Evaluation {
        accuracy: correct as f64 / labels.len() as f64,
        confusion,
        total: labels.len(),
    })
}

pub fn evaluate(model: &TstModel<f32>, split: &[TimeSeriesInstance], classes: usize) -> Result<Evaluation> {
    if split.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty split".into()));
    }
    let probs = predict_all(model, split)?;
    let labels: Vec<usize> = split.iter().map(|i| i.label).collect();
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    confusion_from_predictions(&labels, &preds, classes)
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Clean instances must exceed this true-class probability.
pub const CLEAN_MIN_P: f32 = 0.95;
/// Corrupt instances must fall below this true-class probability.
pub const CORRUPT_MAX_P: f32 = 0.50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRef {
    pub id: usize,
    pub p_true: f32,
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstancePair {
    pub clean: InstanceRef,
    pub corrupt: InstanceRef,
    pub true_class: usize,
}

impl InstancePair {
    /// Checks the selection bounds against fresh probabilities.
    pub fn satisfies_bounds(&self) -> bool {
        self.clean.p_true > CLEAN_MIN_P
            && self.clean.predicted == self.true_class
            && self.corrupt.p_true < CORRUPT_MAX_P
    }
}

/// All same-class (clean, corrupt) pairs, ranked by clean probability
/// descending, then corrupt probability ascending, then ids. An empty list
/// means no qualifying pair exists.
pub fn select_pairs_from_probs(labels: &[usize], probs: &[Vec<f32>]) -> Vec<InstancePair> {
    let refs: Vec<(usize, InstanceRef)> = labels
        .iter()
        .zip(probs)
        .enumerate()
        .map(|(id, (&y, p))| {
            (
                y,
                InstanceRef {
                    id,
                    p_true: p[y],
                    predicted: argmax(p),
                },
            )
        })
        .collect();
    let mut pairs = Vec::new();
    for (y, clean) in refs.iter().filter(|(y, r)| r.p_true > CLEAN_MIN_P && r.predicted == *y) {
        for (_, corrupt) in refs.iter().filter(|(yc, r)| yc == y && r.p_true < CORRUPT_MAX_P) {
            pairs.push(InstancePair {
                clean: clean.clone(),
                corrupt: corrupt.clone(),
                true_class: *y,
            });
        }
    }
    pairs.sort_by(|a, b| {
        b.clean
            .p_true
            .total_cmp(&a.clean.p_true)
            .then(a.corrupt.p_true.total_cmp(&b.corrupt.p_true))
            .then(a.clean.id.cmp(&b.clean.id))
            .then(a.corrupt.id.cmp(&b.corrupt.id))
    });
    pairs
}

pub fn select_pairs(model: &TstModel<f32>, test: &[TimeSeriesInstance]) -> Result<Vec<InstancePair>> {
    let probs = predict_all(model, test)?;
    let labels: Vec<usize> = test.iter().map(|i| i.label).collect();
    Ok(select_pairs_from_probs(&labels, &probs))
}
