// SPDX-License-Identifier: MIT OR Apache-2.0

//! Subcommand implementations. Each writes its artifacts through an
//! [`Output`] and finishes with `manifest.json`.

use std::path::Path;

use anyhow::{anyhow, bail, ensure, Context, Result};
use log::{info, warn};
use serde::Serialize;
use serde_json::json;
use tsmi::causal_graph::{self, degree_centrality, degrees_csv, CausalGraph, DotStyle};
use tsmi::checkpoint::{self, file_sha256, sha256_hex};
use tsmi::dataset::{Dataset, Split, TimeSeriesInstance};
use tsmi::model::{ForwardMode, TstModel};
use tsmi::patching::{find_critical, PatchSession, SweepReport, POSITION_THRESHOLD};
use tsmi::report::{self, json_document, PairIds, Provenance};
use tsmi::sae::{self, SparseAutoencoder};
use tsmi::saliency::{attention_saliency, overlay_csv};
use tsmi::trainer::{self, argmax, InstancePair};

use crate::config::RunConfig;
use crate::output::Output;
use crate::{
    GranularityArg, GraphArgs, GraphMode, PairArgs, ReproArgs, SaeTrainArgs, SaliencyArgs, SplitArg, SweepArgs,
    TopkArgs, TrainArgs,
};

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

struct Loaded {
    model: TstModel<f32>,
    sha: String,
}

pub struct Ctx {
    cfg: RunConfig,
    ds: Dataset,
    data_sha: (String, String),
    model: Option<Loaded>,
}

/// Sweeps needed by the top-k table and both graphs.
struct PairSweeps {
    pair: PairIds,
    layers: SweepReport,
    heads: SweepReport,
    positions: Vec<SweepReport>,
}

impl PairSweeps {
    fn best_head(&self) -> Result<(usize, usize)> {
        let best = self.heads.best().ok_or_else(|| anyhow!("empty head sweep"))?;
        let t = best.targets[0];
        Ok((t.layer(), t.head().expect("head sweep targets heads")))
    }
}

impl Ctx {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let mut ds = Dataset::load(&cfg.train_data, &cfg.test_data, cfg.model.seq_len)
            .with_context(|| format!("loading {} / {}", cfg.train_data.display(), cfg.test_data.display()))?;
        if cfg.standardize {
            ds.standardize()?;
        }
        let data_sha = (file_sha256(&cfg.train_data)?, file_sha256(&cfg.test_data)?);
        info!(
            "dataset: {} train, {} test, {} classes, {} channels",
            ds.train.len(),
            ds.test.len(),
            ds.classes(),
            ds.channels
        );
        Ok(Self {
            cfg,
            ds,
            data_sha,
            model: None,
        })
    }

    fn check_geometry(&self, model: &TstModel<f32>) -> Result<()> {
        let c = model.config();
        ensure!(
            c.channels == self.ds.channels && c.classes == self.ds.classes() && c.seq_len == self.ds.seq_len,
            "model expects {} channels, {} classes, length {}; data has {}, {}, {}",
            c.channels,
            c.classes,
            c.seq_len,
            self.ds.channels,
            self.ds.classes(),
            self.ds.seq_len
        );
        Ok(())
    }

    fn load_model(&mut self) -> Result<&Loaded> {
        if self.model.is_none() {
            let path = &self.cfg.checkpoint;
            let bytes = std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
            let model = checkpoint::model_from_bytes(&bytes).with_context(|| format!("decoding {}", path.display()))?;
            self.check_geometry(&model)?;
            info!("loaded {} ({} parameters)", path.display(), model.parameter_count());
            self.model = Some(Loaded {
                model,
                sha: sha256_hex(&bytes),
            });
        }
        Ok(self.model.as_ref().expect("just loaded"))
    }

    /// Configuration recorded in every artifact: the resolved run settings
    /// with the checkpoint's own model shape and the data file digests.
    fn provenance(&self, checkpoint_sha: &str, model: &TstModel<f32>) -> Result<Provenance> {
        let mut run = serde_json::to_value(&self.cfg)?;
        run["model"] = serde_json::to_value(model.config())?;
        let config = json!({
            "run": run,
            "data": { "train_sha256": self.data_sha.0, "test_sha256": self.data_sha.1 },
        });
        Ok(Provenance::new(checkpoint_sha, self.cfg.seed, config))
    }

    fn instance(&self, split: Split, id: usize) -> Result<&TimeSeriesInstance> {
        let s = self.ds.split(split);
        s.get(id)
            .ok_or_else(|| anyhow!("{} instance {id} out of range (split has {})", split.as_str(), s.len()))
    }

    fn resolve_pair(&self, model: &TstModel<f32>, args: &PairArgs) -> Result<PairIds> {
        if let (Some(clean), Some(corrupt)) = (args.clean, args.corrupt) {
            let true_class = self.instance(Split::Test, clean)?.label;
            let c = self.instance(Split::Test, corrupt)?;
            if c.label != true_class {
                warn!("corrupt instance {corrupt} has class {}, clean has {true_class}", c.label);
            }
            return Ok(PairIds {
                clean,
                corrupt,
                true_class,
            });
        }
        let pairs = trainer::select_pairs(model, &self.ds.test)?;
        let p = pairs.get(args.pair_rank).ok_or_else(|| {
            anyhow!("pair rank {} requested but only {} qualifying pairs exist", args.pair_rank, pairs.len())
        })?;
        Ok(PairIds::from(p))
    }

    fn session<'m>(&self, model: &'m TstModel<f32>, pair: PairIds) -> Result<PatchSession<'m>> {
        let clean = &self.instance(Split::Test, pair.clean)?.values;
        let corrupt = &self.instance(Split::Test, pair.corrupt)?.values;
        Ok(PatchSession::new(model, clean, corrupt, pair.true_class)?.with_jobs(self.cfg.jobs))
    }

    fn all_sweeps(&self, model: &TstModel<f32>, pair: PairIds) -> Result<PairSweeps> {
        let s = self.session(model, pair)?;
        Ok(PairSweeps {
            pair,
            layers: s.sweep_layers()?,
            heads: s.sweep_heads()?,
            positions: s.sweep_all_positions()?,
        })
    }

    fn out(&self) -> Result<Output> {
        Output::new(&self.cfg.out)
    }

    pub fn train(&mut self, args: &TrainArgs) -> Result<()> {
        let mut tc = self.cfg.train.clone();
        if let Some(v) = args.epochs {
            tc.epochs = v;
        }
        if let Some(v) = args.batch_size {
            tc.batch_size = v;
        }
        if let Some(v) = args.lr {
            tc.lr = v;
        }
        if let Some(v) = args.weight_decay {
            tc.weight_decay = v;
        }
        tc.validate()?;
        self.cfg.train = tc;
        let mut out = self.out()?;
        self.train_into(&mut out)?;
        let loaded = self.model.as_ref().expect("trained");
        let prov = self.provenance(&loaded.sha, &loaded.model)?;
        out.finish("train", &prov)?;
        Ok(())
    }

    fn train_into(&mut self, out: &mut Output) -> Result<()> {
        let model = TstModel::<f32>::new(self.cfg.model.clone(), self.cfg.seed)?;
        self.check_geometry(&model)?;
        let epochs = self.cfg.train.epochs;
        info!("training {} parameters for {epochs} epochs", model.parameter_count());
        let outcome = trainer::train(model, &self.ds, &self.cfg.train, |m| {
            info!(
                "epoch {:>3}/{epochs} loss {:.4} test acc {:.4}",
                m.epoch, m.train_loss, m.test_acc
            );
        })?;
        let bytes = checkpoint::model_to_bytes(&outcome.model)?;
        let sha = sha256_hex(&bytes);
        self.write_outside(out, &self.cfg.checkpoint.clone(), &bytes)?;
        let prov = self.provenance(&sha, &outcome.model)?;
        out.write("train_metrics.csv", report::metrics_csv(&prov, &outcome.log))?;
        if let Some(last) = outcome.log.last() {
            println!("final test accuracy {:.4}", last.test_acc);
        }
        self.model = Some(Loaded {
            model: outcome.model,
            sha,
        });
        Ok(())
    }

    /// Writes a file that may live outside the output directory and lists it
    /// in the manifest relative to that directory when possible.
    fn write_outside(&self, out: &mut Output, path: &Path, bytes: &[u8]) -> Result<()> {
        match path.strip_prefix(out.dir()) {
            Ok(rel) => {
                out.write(&rel.to_string_lossy(), bytes)?;
            }
            Err(_) => {
                if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                    std::fs::create_dir_all(parent)?;
                }
                std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
                out.record(&path.to_string_lossy(), bytes);
            }
        }
        info!("wrote {}", path.display());
        Ok(())
    }

    pub fn eval(&mut self) -> Result<()> {
        let mut out = self.out()?;
        let prov = self.eval_into(&mut out)?;
        out.finish("eval", &prov)?;
        Ok(())
    }

    fn eval_into(&mut self, out: &mut Output) -> Result<Provenance> {
        self.load_model()?;
        let l = self.model.as_ref().expect("loaded");
        let ev = trainer::evaluate(&l.model, &self.ds.test, self.ds.classes())?;
        let prov = self.provenance(&l.sha, &l.model)?;
        println!("test accuracy {:.4} ({} instances)", ev.accuracy, ev.total);
        info!("test accuracy {:.4}", ev.accuracy);
        let doc = json!({
            "accuracy": ev.accuracy,
            "total": ev.total,
            "class_names": self.ds.class_names,
            "confusion": ev.confusion,
        });
        out.write("eval.json", json_document(&prov, &doc)?)?;
        out.write("confusion.csv", report::confusion_csv(&prov, &ev, &self.ds.class_names))?;
        Ok(prov)
    }

    pub fn pairs(&mut self, show: usize) -> Result<()> {
        let mut out = self.out()?;
        let (prov, _) = self.pairs_into(&mut out, show)?;
        out.finish("pairs", &prov)?;
        Ok(())
    }

    fn pairs_into(&mut self, out: &mut Output, show: usize) -> Result<(Provenance, Vec<InstancePair>)> {
        self.load_model()?;
        let l = self.model.as_ref().expect("loaded");
        let pairs = trainer::select_pairs(&l.model, &self.ds.test)?;
        let prov = self.provenance(&l.sha, &l.model)?;
        if pairs.is_empty() {
            warn!("no test pair meets the clean/corrupt bounds");
        }
        println!("{} qualifying pairs", pairs.len());
        println!("rank  clean  p_clean  corrupt  p_corrupt  class");
        for (i, p) in pairs.iter().take(show).enumerate() {
            println!(
                "{i:>4}  {:>5}  {:.4}   {:>7}  {:.4}     {}",
                p.clean.id, p.clean.p_true, p.corrupt.id, p.corrupt.p_true, p.true_class
            );
        }
        out.write("pairs.json", json_document(&prov, &pairs)?)?;
        Ok((prov, pairs))
    }

    pub fn sweep(&mut self, args: &SweepArgs) -> Result<()> {
        self.load_model()?;
        let l = self.model.as_ref().expect("loaded");
        let pair = self.resolve_pair(&l.model, &args.pair)?;
        let s = self.session(&l.model, pair)?;
        let (sweep, name) = match args.granularity {
            GranularityArg::Layer => (s.sweep_layers()?, "sweep_layer".to_string()),
            GranularityArg::Head => (s.sweep_heads()?, "sweep_head".to_string()),
            GranularityArg::Pos => {
                let (layer, head) = match (args.layer, args.head) {
                    (Some(l), Some(h)) => (l, h),
                    _ => {
                        let heads = s.sweep_heads()?;
                        let best = heads.best().ok_or_else(|| anyhow!("empty head sweep"))?.targets[0];
                        info!("position sweep on best head {}", best.label());
                        (best.layer(), best.head().expect("head target"))
                    }
                };
                (s.sweep_positions(layer, head)?, format!("sweep_pos_L{layer}H{head}"))
            }
        };
        let prov = self.provenance(&l.sha, &l.model)?.with_pair(pair);
        for r in &sweep.results {
            println!("{:<10} ΔP {:+.6}", r.targets[0].label(), r.delta_p);
        }
        if let Some(full) = &sweep.full_head {
            println!("full head ΔP {:+.6}, sum over positions {:+.6}", full.delta_p, sweep.delta_sum());
        }
        let mut out = self.out()?;
        write_sweep(&mut out, "", &name, &prov, &sweep)?;
        out.finish("patch sweep", &prov)?;
        Ok(())
    }

    pub fn topk(&mut self, args: &TopkArgs) -> Result<()> {
        self.load_model()?;
        let l = self.model.as_ref().expect("loaded");
        let pair = self.resolve_pair(&l.model, &args.pair)?;
        let prov = self.provenance(&l.sha, &l.model)?.with_pair(pair);
        let mut out = self.out()?;
        let s = self.session(&l.model, pair)?;
        let positions = s.sweep_all_positions()?;
        write_topk(&mut out, "", &prov, &s, &positions, args.k, args.threshold)?;
        out.finish("patch topk", &prov)?;
        Ok(())
    }

    pub fn saliency(&mut self, args: &SaliencyArgs) -> Result<()> {
        self.load_model()?;
        let l = self.model.as_ref().expect("loaded");
        let prov = self.provenance(&l.sha, &l.model)?;
        let mut out = self.out()?;
        self.write_saliency(&mut out, "", &prov, &l.model, args.split.into(), args.instance, args.layer, args.head)?;
        out.finish("saliency", &prov)?;
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn write_saliency(
        &self,
        out: &mut Output,
        prefix: &str,
        prov: &Provenance,
        model: &TstModel<f32>,
        split: Split,
        id: usize,
        layer: usize,
        head: usize,
    ) -> Result<()> {
        let inst = self.instance(split, id)?;
        let (_, cache) = model.forward(&inst.values, ForwardMode::Eval, true)?;
        let profile = attention_saliency(&cache.expect("capture requested"), layer, head)?;
        let prov = prov
            .clone()
            .with_param("split", split.as_str())
            .with_param("instance", id)
            .with_param("layer", layer)
            .with_param("head", head);
        let mut csv = prov.csv_comment();
        csv.push_str(&overlay_csv(&profile, &inst.values)?);
        out.write(&format!("{prefix}saliency_L{layer}H{head}_i{id}.csv"), csv)?;
        Ok(())
    }

    pub fn graph(&mut self, args: &GraphArgs) -> Result<()> {
        self.load_model()?;
        let l = self.model.as_ref().expect("loaded");
        let pair = self.resolve_pair(&l.model, &args.pair)?;
        let prov = self.provenance(&l.sha, &l.model)?.with_pair(pair);
        let sweeps = self.all_sweeps(&l.model, pair)?;
        let mut out = self.out()?;
        match args.mode {
            GraphMode::Topk => write_topk_graph(&mut out, "", &prov, &sweeps, args.k)?,
            GraphMode::Threshold => write_threshold_graph(&mut out, "", &prov, &sweeps, args.theta_head, args.theta_pos)?,
        }
        out.finish("graph", &prov)?;
        Ok(())
    }

    fn load_sae(&self) -> Result<(SparseAutoencoder<f32>, String)> {
        let path = &self.cfg.sae_checkpoint;
        let bytes = std::fs::read(path).with_context(|| format!("reading SAE checkpoint {}", path.display()))?;
        let sae = sae::sae_from_bytes(&bytes).with_context(|| format!("decoding {}", path.display()))?;
        Ok((sae, sha256_hex(&bytes)))
    }

    pub fn sae_train(&mut self, args: &SaeTrainArgs) -> Result<()> {
        let sc = &mut self.cfg.sae;
        if let Some(v) = args.lambda {
            sc.lambda = v;
        }
        if let Some(v) = args.code_dim {
            sc.code_dim = v;
        }
        if let Some(v) = args.epochs {
            sc.epochs = v;
        }
        if let Some(v) = args.lr {
            sc.lr = v;
        }
        if let Some(v) = args.batch_size {
            sc.batch_size = v;
        }
        if args.no_center {
            sc.center = false;
        }
        if args.free_decoder {
            sc.unit_norm_decoder = false;
        }
        let mut out = self.out()?;
        let prov = self.sae_train_into(&mut out)?;
        out.finish("sae train", &prov)?;
        Ok(())
    }

    fn sae_train_into(&mut self, out: &mut Output) -> Result<Provenance> {
        self.load_model()?;
        let l = self.model.as_ref().expect("loaded");
        let mut sc = self.cfg.sae.clone();
        sc.input_dim = l.model.config().d_model;
        let acts = sae::collect_activations(&l.model, &self.ds.train, sc.layer)?;
        info!(
            "SAE on {} rows of layer {} MLP output, code {} λ {}",
            acts.rows.rows(),
            sc.layer,
            sc.code_dim,
            sc.lambda
        );
        let trained = sae::train_sae(&acts.rows, &sc)?;
        let bytes = sae::sae_to_bytes(&trained.sae)?;
        let prov = self
            .provenance(&l.sha, &l.model)?
            .with_param("sae_sha256", sha256_hex(&bytes));
        self.write_outside(out, &self.cfg.sae_checkpoint, &bytes)?;
        let mut curve = prov.csv_comment();
        curve.push_str("epoch,loss\n");
        for e in &trained.curve {
            curve.push_str(&format!("{},{}\n", e.epoch, e.loss));
        }
        out.write("sae_curve.csv", curve)?;
        out.write("sae_stats.json", json_document(&prov, &trained.stats)?)?;
        println!(
            "SAE mse {:.6} ({:.2}% of variance), active fraction {:.4}",
            trained.stats.mse,
            100.0 * trained.stats.mse / trained.stats.input_variance,
            trained.stats.active_fraction
        );
        Ok(prov)
    }

    fn sae_prov(&mut self) -> Result<(SparseAutoencoder<f32>, Provenance)> {
        self.load_model()?;
        let (sae, sae_sha) = self.load_sae()?;
        let l = self.model.as_ref().expect("loaded");
        ensure!(
            sae.config.input_dim == l.model.config().d_model && sae.config.layer < l.model.config().layers,
            "SAE (input {}, layer {}) does not fit the model",
            sae.config.input_dim,
            sae.config.layer
        );
        let prov = self.provenance(&l.sha, &l.model)?.with_param("sae_sha256", sae_sha);
        Ok((sae, prov))
    }

    pub fn sae_report(&mut self, top_n: usize) -> Result<()> {
        let (sae, prov) = self.sae_prov()?;
        let mut out = self.out()?;
        self.write_sae_report(&mut out, &prov, &sae, top_n)?;
        out.finish("sae report", &prov)?;
        Ok(())
    }

    fn write_sae_report(
        &self,
        out: &mut Output,
        prov: &Provenance,
        sae: &SparseAutoencoder<f32>,
        top_n: usize,
    ) -> Result<Vec<sae::NeuronReport>> {
        let model = &self.model.as_ref().expect("loaded").model;
        let acts = sae::collect_activations(model, &self.ds.test, sae.config.layer)?;
        let reports = sae::rank_selective_neurons(sae, &acts, top_n)?;
        let dead = reports.iter().filter(|r| r.dead).count();
        println!("{} neurons, {dead} dead on the test split", reports.len());
        for r in reports.iter().take(5) {
            println!(
                "neuron {:>3}: max {:.4}, class {:?} purity {:.2}",
                r.neuron, r.max_activation, r.dominant_class, r.purity
            );
        }
        out.write("sae_report.json", json_document(&prov.clone().with_param("top_n", top_n), &reports)?)?;
        Ok(reports)
    }

    pub fn sae_heatmap(&mut self, id: usize, split: SplitArg) -> Result<()> {
        let (sae, prov) = self.sae_prov()?;
        let mut out = self.out()?;
        self.write_heatmap(&mut out, &prov, &sae, split.into(), id)?;
        out.finish("sae heatmap", &prov)?;
        Ok(())
    }

    fn write_heatmap(
        &self,
        out: &mut Output,
        prov: &Provenance,
        sae: &SparseAutoencoder<f32>,
        split: Split,
        id: usize,
    ) -> Result<()> {
        let model = &self.model.as_ref().expect("loaded").model;
        let inst = self.instance(split, id)?;
        let map = sae::activation_heatmap(model, sae, &inst.values)?;
        let prov = prov.clone().with_param("split", split.as_str()).with_param("instance", id);
        let mut csv = prov.csv_comment();
        csv.push_str(&sae::heatmap_csv(&map));
        out.write(&format!("sae_heatmap_i{id}.csv"), csv)?;
        Ok(())
    }

    pub fn sae_steer(&mut self, id: usize, neuron: usize, gain: f32, split: SplitArg) -> Result<()> {
        let (sae, prov) = self.sae_prov()?;
        let mut out = self.out()?;
        self.write_steer(&mut out, &prov, &sae, split.into(), id, neuron, gain)?;
        out.finish("sae steer", &prov)?;
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn write_steer(
        &self,
        out: &mut Output,
        prov: &Provenance,
        sae: &SparseAutoencoder<f32>,
        split: Split,
        id: usize,
        neuron: usize,
        gain: f32,
    ) -> Result<()> {
        let model = &self.model.as_ref().expect("loaded").model;
        let inst = self.instance(split, id)?;
        let r = sae::sae_steer_patch(model, sae, &inst.values, neuron, gain)?;
        println!(
            "neuron {neuron} × {gain}: class {} → class {}, P(true={}) {:.4} → {:.4}",
            argmax(&r.probs_before),
            argmax(&r.probs_after),
            inst.label,
            r.probs_before[inst.label],
            r.probs_after[inst.label]
        );
        let prov = prov
            .clone()
            .with_param("split", split.as_str())
            .with_param("instance", id)
            .with_param("true_class", inst.label);
        out.write(&format!("sae_steer_i{id}_n{neuron}.json"), json_document(&prov, &r)?)?;
        Ok(())
    }

    pub fn repro(&mut self, args: &ReproArgs) -> Result<()> {
        let mut out = self.out()?;
        if self.cfg.checkpoint.exists() {
            info!("using existing checkpoint {}", self.cfg.checkpoint.display());
        } else {
            info!("no checkpoint at {}; training", self.cfg.checkpoint.display());
            self.train_into(&mut out)?;
        }
        let prov = self.eval_into(&mut out)?;
        let (_, pairs) = self.pairs_into(&mut out, args.pairs)?;
        let chosen: Vec<PairIds> = pairs.iter().take(args.pairs).map(PairIds::from).collect();
        let l = self.model.as_ref().expect("loaded");
        for (rank, &pair) in chosen.iter().enumerate() {
            info!("pair {rank}: clean {} corrupt {} class {}", pair.clean, pair.corrupt, pair.true_class);
            let prefix = format!("pair{rank}/");
            let pprov = prov.clone().with_pair(pair);
            let sweeps = self.all_sweeps(&l.model, pair)?;
            let (bl, bh) = sweeps.best_head()?;
            write_sweep(&mut out, &prefix, "sweep_layer", &pprov, &sweeps.layers)?;
            write_sweep(&mut out, &prefix, "sweep_head", &pprov, &sweeps.heads)?;
            let best = sweeps
                .positions
                .iter()
                .find(|s| s.layer == Some(bl) && s.head == Some(bh))
                .expect("every head has a position sweep");
            write_sweep(&mut out, &prefix, &format!("sweep_pos_L{bl}H{bh}"), &pprov, best)?;
            let s = self.session(&l.model, pair)?;
            write_topk(&mut out, &prefix, &pprov, &s, &sweeps.positions, args.k, POSITION_THRESHOLD)?;
            self.write_saliency(&mut out, &prefix, &pprov, &l.model, Split::Test, pair.clean, bl, bh)?;
            write_topk_graph(&mut out, &prefix, &pprov, &sweeps, args.graph_k)?;
            write_threshold_graph(
                &mut out,
                &prefix,
                &pprov,
                &sweeps,
                tsmi::patching::HEAD_THRESHOLD,
                POSITION_THRESHOLD,
            )?;
        }

        if !self.cfg.sae_checkpoint.exists() {
            self.sae_train_into(&mut out)?;
        }
        let (sae, sprov) = self.sae_prov()?;
        let reports = self.write_sae_report(&mut out, &sprov, &sae, 10)?;
        for pair in &chosen {
            self.write_heatmap(&mut out, &sprov, &sae, Split::Test, pair.clean)?;
            self.write_heatmap(&mut out, &sprov, &sae, Split::Test, pair.corrupt)?;
            // push the corrupt run along the most selective true-class direction
            let neuron = reports
                .iter()
                .filter(|r| !r.dead)
                .find(|r| r.dominant_class == Some(pair.true_class))
                .or_else(|| reports.iter().find(|r| !r.dead))
                .map(|r| r.neuron);
            if let Some(n) = neuron {
                self.write_steer(&mut out, &sprov, &sae, Split::Test, pair.corrupt, n, 5.0)?;
            }
        }
        let written = out.len();
        out.finish("repro", &prov)?;
        println!("repro wrote {written} files plus manifest.json to {}", self.cfg.out.display());
        if chosen.len() < args.pairs {
            bail!("requested {} pairs but only {} qualify", args.pairs, chosen.len());
        }
        Ok(())
    }
}

fn write_json<T: Serialize>(out: &mut Output, rel: &str, prov: &Provenance, data: &T) -> Result<()> {
    out.write(rel, json_document(prov, data)?)?;
    Ok(())
}

fn write_sweep(out: &mut Output, prefix: &str, name: &str, prov: &Provenance, sweep: &SweepReport) -> Result<()> {
    out.write(&format!("{prefix}{name}.csv"), report::sweep_csv(prov, sweep))?;
    write_json(out, &format!("{prefix}{name}.json"), prov, sweep)
}

fn write_topk(
    out: &mut Output,
    prefix: &str,
    prov: &Provenance,
    session: &PatchSession<'_>,
    positions: &[SweepReport],
    k: usize,
    threshold: f32,
) -> Result<()> {
    let critical = find_critical(positions, threshold)?;
    info!("{} position patches with ΔP ≥ {threshold}", critical.len());
    let table = session.accumulate_topk(&critical, k)?;
    println!("k   ΔP cumulative  P final   added");
    for r in &table.rows {
        println!("{:<3} {:+.6}      {:.6}  {}", r.k, r.delta_p, r.p_final, r.added.label());
    }
    let prov = prov
        .clone()
        .with_param("k", k)
        .with_param("threshold", threshold);
    out.write(&format!("{prefix}topk.csv"), report::topk_csv(&prov, &table))?;
    write_json(out, &format!("{prefix}topk.json"), &prov, &table)
}

fn write_graph(out: &mut Output, prefix: &str, name: &str, prov: &Provenance, g: CausalGraph) -> Result<CausalGraph> {
    let g = g.with_provenance(prov.clone());
    g.validate()?;
    out.write(&format!("{prefix}{name}.json"), g.to_json()?)?;
    out.write(&format!("{prefix}{name}.dot"), g.to_dot(&DotStyle::default()))?;
    println!("{name}: {} nodes, {} edges", g.nodes.len(), g.edges.len());
    Ok(g)
}

fn write_topk_graph(out: &mut Output, prefix: &str, prov: &Provenance, s: &PairSweeps, k: usize) -> Result<()> {
    let g = causal_graph::build_topk_graph(&s.positions, &s.heads, s.pair.true_class, k)?;
    write_graph(out, prefix, "graph_topk", prov, g)?;
    Ok(())
}

fn write_threshold_graph(
    out: &mut Output,
    prefix: &str,
    prov: &Provenance,
    s: &PairSweeps,
    theta_head: f32,
    theta_pos: f32,
) -> Result<()> {
    let g = causal_graph::build_threshold_graph(&s.positions, &s.heads, s.pair.true_class, theta_head, theta_pos)?;
    let g = write_graph(out, prefix, "graph_threshold", prov, g)?;
    let d = degree_centrality(&g);
    ensure!(
        d.timestep_total() == d.head_total(),
        "degree handshake failed: {} vs {}",
        d.timestep_total(),
        d.head_total()
    );
    out.write(&format!("{prefix}degrees.csv"), degrees_csv(prov, &d))?;
    Ok(())
}
