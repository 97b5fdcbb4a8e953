// SPDX-License-Identifier: MIT OR Apache-2.0

//! Denoising activation patching.
//!
//! A [`PatchSession`] caches the clean instance's activations once, then
//! every query re-runs the corrupt instance with some activations replaced
//! by the clean ones and reports the change in true-class probability:
//!
//! ```text
//! ΔP = P_patched(y_true) − P_orig(y_true)
//! ```
//!
//! Singleton sweeps evaluate each patch independently; multi-target calls
//! apply all patches in one pass.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActivationCache, ForwardMode, TapPoint, TstModel};
use crate::nn::Tensor;
use crate::trainer::argmax;

/// Outcome of one intervention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchResult {
    pub targets: Vec<TapPoint>,
    pub p_orig: f32,
    pub p_patched: f32,
    pub delta_p: f32,
    pub predicted_after: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Layer,
    Head,
    #[serde(rename = "pos")]
    Position,
}

impl Granularity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Granularity::Layer => "layer",
            Granularity::Head => "head",
            Granularity::Position => "pos",
        }
    }
}

/// Singleton patches covering one granularity's full index range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub granularity: Granularity,
    pub layer: Option<usize>,
    pub head: Option<usize>,
    pub results: Vec<PatchResult>,
    /// For position sweeps: the whole-head patch, for comparison with the
    /// sum of per-position effects.
    pub full_head: Option<PatchResult>,
}

impl SweepReport {
    /// `Σ ΔP` over the sweep, accumulated in `f64`.
    pub fn delta_sum(&self) -> f64 {
        self.results.iter().map(|r| r.delta_p as f64).sum()
    }

    /// Result with the largest ΔP (lowest index on ties).
    pub fn best(&self) -> Option<&PatchResult> {
        let mut best: Option<&PatchResult> = None;
        for r in &self.results {
            if best.is_none_or(|b| r.delta_p > b.delta_p) {
                best = Some(r);
            }
        }
        best
    }
}

/// Runs `f` over `items` on a pool of `jobs` threads, keeping input order.
pub fn run_jobs<T, R, G>(jobs: usize, items: &[T], f: G) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    G: Fn(&T) -> Result<R> + Sync + Send,
{
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

/// A clean donor and a corrupt recipient sharing a true class.
pub struct PatchSession<'m> {
    model: &'m TstModel<f32>,
    corrupt: Tensor<f32>,
    donor: ActivationCache<f32>,
    true_class: usize,
    p_orig: f32,
    predicted_orig: usize,
    jobs: usize,
}

impl<'m> PatchSession<'m> {
    pub fn new(model: &'m TstModel<f32>, clean: &Tensor<f32>, corrupt: &Tensor<f32>, true_class: usize) -> Result<Self> {
        let k = model.config().classes;
        if true_class >= k {
            return Err(Error::OutOfRange {
                what: "true class",
                index: true_class,
                limit: k,
            });
        }
        let (_, donor) = model.forward(clean, ForwardMode::Eval, true)?;
        let (probs, _) = model.forward(corrupt, ForwardMode::Eval, false)?;
        Ok(Self {
            model,
            corrupt: corrupt.clone(),
            donor: donor.expect("capture requested"),
            true_class,
            p_orig: probs.data()[true_class],
            predicted_orig: probs.argmax(),
            jobs: 1,
        })
    }

    /// Worker threads used by sweeps. Results do not depend on it.
    pub fn with_jobs(mut self, jobs: usize) -> Self {
        self.jobs = jobs.max(1);
        self
    }

    pub fn model(&self) -> &TstModel<f32> {
        self.model
    }

    pub fn donor(&self) -> &ActivationCache<f32> {
        &self.donor
    }

    pub fn p_orig(&self) -> f32 {
        self.p_orig
    }

    pub fn true_class(&self) -> usize {
        self.true_class
    }

    /// ΔP for patching all `targets` simultaneously. The empty set is the
    /// unpatched run, so its ΔP is exactly zero.
    pub fn delta_p(&self, targets: &[TapPoint]) -> Result<PatchResult> {
        let cfg = self.model.config();
        for t in targets {
            t.validate(cfg)?;
        }
        if targets.is_empty() {
            return Ok(PatchResult {
                targets: Vec::new(),
                p_orig: self.p_orig,
                p_patched: self.p_orig,
                delta_p: 0.0,
                predicted_after: self.predicted_orig,
            });
        }
        let probs = self.model.forward_with_patches(&self.corrupt, &self.donor, targets)?;
        let p_patched = probs.data()[self.true_class];
        Ok(PatchResult {
            targets: targets.to_vec(),
            p_orig: self.p_orig,
            p_patched,
            delta_p: p_patched - self.p_orig,
            predicted_after: argmax(probs.data()),
        })
    }

    fn sweep(&self, points: Vec<TapPoint>) -> Result<Vec<PatchResult>> {
        run_jobs(self.jobs, &points, |tp| self.delta_p(std::slice::from_ref(tp)))
    }

    /// One `Layer(ℓ)` patch per layer.
    pub fn sweep_layers(&self) -> Result<SweepReport> {
        let points = (0..self.model.config().layers)
            .map(|layer| TapPoint::Layer { layer })
            .collect();
        Ok(SweepReport {
            granularity: Granularity::Layer,
            layer: None,
            head: None,
            results: self.sweep(points)?,
            full_head: None,
        })
    }

    /// One `Head(ℓ,h)` patch per head, layer-major.
    pub fn sweep_heads(&self) -> Result<SweepReport> {
        let cfg = self.model.config();
        let points = (0..cfg.layers)
            .flat_map(|layer| (0..cfg.heads).map(move |head| TapPoint::Head { layer, head }))
            .collect();
        Ok(SweepReport {
            granularity: Granularity::Head,
            layer: None,
            head: None,
            results: self.sweep(points)?,
            full_head: None,
        })
    }

    /// One `HeadPos(ℓ,h,t)` patch per timestep, plus the full-head patch.
    pub fn sweep_positions(&self, layer: usize, head: usize) -> Result<SweepReport> {
        let cfg = self.model.config();
        TapPoint::Head { layer, head }.validate(cfg)?;
        let points = (0..cfg.seq_len)
            .map(|t| TapPoint::HeadPos { layer, head, t })
            .collect();
        Ok(SweepReport {
            granularity: Granularity::Position,
            layer: Some(layer),
            head: Some(head),
            results: self.sweep(points)?,
            full_head: Some(self.delta_p(&[TapPoint::Head { layer, head }])?),
        })
    }

    /// Position sweeps for every head, layer-major.
    pub fn sweep_all_positions(&self) -> Result<Vec<SweepReport>> {
        let cfg = self.model.config();
        let mut out = Vec::with_capacity(cfg.layers * cfg.heads);
        for layer in 0..cfg.layers {
            for head in 0..cfg.heads {
                out.push(self.sweep_positions(layer, head)?);
            }
        }
        Ok(out)
    }

    /// Applies the top-1, top-2, … top-`k_max` patches of `ranked`
    /// simultaneously and records the cumulative effect of each prefix.
    /// Non-monotone sequences are reported as measured.
    pub fn accumulate_topk(&self, ranked: &[CriticalPatch], k_max: usize) -> Result<TopKTable> {
        let k = if k_max > ranked.len() {
            warn!(
                "requested top-{k_max} patches but only {} are available; truncating",
                ranked.len()
            );
            ranked.len()
        } else {
            k_max
        };
        let prefixes: Vec<usize> = (1..=k).collect();
        let results = run_jobs(self.jobs, &prefixes, |&n| {
            let targets: Vec<TapPoint> = ranked[..n].iter().map(|c| c.target).collect();
            self.delta_p(&targets)
        })?;
        let rows = results
            .into_iter()
            .zip(ranked)
            .enumerate()
            .map(|(i, (r, c))| TopKRow {
                k: i + 1,
                added: c.target,
                individual_delta_p: c.delta_p,
                delta_p: r.delta_p,
                p_final: r.p_patched,
            })
            .collect();
        Ok(TopKTable {
            requested_k: k_max,
            p_orig: self.p_orig,
            rows,
        })
    }
}

/// A patch whose singleton ΔP passed a threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalPatch {
    pub target: TapPoint,
    pub delta_p: f32,
}

/// Default critical threshold for timestep-level patches.
pub const POSITION_THRESHOLD: f32 = 0.01;
/// Default critical threshold for head-level patches.
pub const HEAD_THRESHOLD: f32 = 0.10;

/// Singleton results with `ΔP ≥ threshold` (strictly positive when the
/// threshold is zero), ranked by ΔP descending then `(ℓ, h, t)` ascending.
pub fn find_critical<'a>(sweeps: impl IntoIterator<Item = &'a SweepReport>, threshold: f32) -> Result<Vec<CriticalPatch>> {
    if !(threshold >= 0.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} must be ≥ 0")));
    }
    let mut out: Vec<CriticalPatch> = sweeps
        .into_iter()
        .flat_map(|s| s.results.iter())
        .filter(|r| r.targets.len() == 1 && r.delta_p >= threshold && r.delta_p > 0.0)
        .map(|r| CriticalPatch {
            target: r.targets[0],
            delta_p: r.delta_p,
        })
        .collect();
    rank_patches(&mut out);
    Ok(out)
}

/// Sorts by ΔP descending, ties by index ascending.
pub fn rank_patches(patches: &mut [CriticalPatch]) {
    patches.sort_by(|a, b| {
        b.delta_p
            .total_cmp(&a.delta_p)
            .then(a.target.index_key().cmp(&b.target.index_key()))
    });
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopKRow {
    pub k: usize,
    /// The patch added at this step.
    pub added: TapPoint,
    /// Its singleton ΔP.
    pub individual_delta_p: f32,
    /// ΔP with the first `k` patches applied together.
    pub delta_p: f32,
    pub p_final: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopKTable {
    pub requested_k: usize,
    pub p_orig: f32,
    pub rows: Vec<TopKRow>,
}

impl TopKTable {
    pub fn truncated(&self) -> bool {
        self.rows.len() < self.requested_k
    }

    /// Steps where adding a patch lowered the probability.
    pub fn dips(&self) -> Vec<usize> {
        self.rows
            .windows(2)
            .filter(|w| w[1].p_final < w[0].p_final)
            .map(|w| w[1].k)
            .collect()
    }
}
