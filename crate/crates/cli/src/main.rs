// SPDX-License-Identifier: MIT OR Apache-2.0

//! `tsmi` command-line tool.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{FileConfig, Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "tsmi", version, about = "Train and interrogate a time-series transformer")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GlobalArgs {
    /// TOML file with run settings; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "TSMI_OUT")]
    out: Option<PathBuf>,
    /// Training split in `.ts` format.
    #[arg(long, global = true)]
    train_data: Option<PathBuf>,
    /// Test split in `.ts` format.
    #[arg(long, global = true)]
    test_data: Option<PathBuf>,
    /// Skip per-channel z-normalisation.
    #[arg(long, global = true)]
    no_standardize: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps and batched inference.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Model checkpoint (default: <out>/model.tsmi).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// SAE checkpoint (default: <out>/sae.tsmi).
    #[arg(long, global = true)]
    sae_checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write its checkpoint and learning curve.
    Train(TrainArgs),
    /// Test accuracy and confusion matrix.
    Eval,
    /// Rank clean/corrupt instance pairs on the test split.
    Pairs {
        /// Pairs to print (all are written).
        #[arg(long, default_value_t = 10)]
        show: usize,
    },
    /// Activation patching.
    #[command(subcommand)]
    Patch(PatchCmd),
    /// Attention saliency overlaid on an instance.
    Saliency(SaliencyArgs),
    /// Causal graph from patching sweeps.
    Graph(GraphArgs),
    /// Sparse autoencoder over MLP outputs.
    #[command(subcommand)]
    Sae(SaeCmd),
    /// Full pipeline on the two top-ranked pairs.
    Repro(ReproArgs),
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
}

/// Which clean/corrupt pair to analyse.
#[derive(Args, Debug, Clone)]
pub struct PairArgs {
    /// Rank in the pair list (0 = best).
    #[arg(long, default_value_t = 0)]
    pub pair_rank: usize,
    /// Explicit clean instance id (test split); requires --corrupt.
    #[arg(long, requires = "corrupt", conflicts_with = "pair_rank")]
    pub clean: Option<usize>,
    /// Explicit corrupt instance id (test split); requires --clean.
    #[arg(long, requires = "clean", conflicts_with = "pair_rank")]
    pub corrupt: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum GranularityArg {
    Layer,
    Head,
    Pos,
}

#[derive(Subcommand, Debug)]
enum PatchCmd {
    /// Singleton patches over one granularity.
    Sweep(SweepArgs),
    /// Cumulative effect of the top-k position patches.
    Topk(TopkArgs),
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub granularity: GranularityArg,
    /// Layer for position sweeps (default: best head's layer).
    #[arg(long, requires = "head")]
    pub layer: Option<usize>,
    /// Head for position sweeps.
    #[arg(long, requires = "layer")]
    pub head: Option<usize>,
    #[command(flatten)]
    pub pair: PairArgs,
}

#[derive(Args, Debug, Clone)]
pub struct TopkArgs {
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Minimum singleton ΔP for a patch to be ranked.
    #[arg(long, default_value_t = tsmi::patching::POSITION_THRESHOLD)]
    pub threshold: f32,
    #[command(flatten)]
    pub pair: PairArgs,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Args, Debug, Clone)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub layer: usize,
    #[arg(long)]
    pub head: usize,
    #[arg(long)]
    pub instance: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum GraphMode {
    Topk,
    Threshold,
}

#[derive(Args, Debug, Clone)]
pub struct GraphArgs {
    #[arg(long, value_enum)]
    pub mode: GraphMode,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = tsmi::patching::HEAD_THRESHOLD)]
    pub theta_head: f32,
    #[arg(long, default_value_t = tsmi::patching::POSITION_THRESHOLD)]
    pub theta_pos: f32,
    #[command(flatten)]
    pub pair: PairArgs,
}

#[derive(Subcommand, Debug)]
enum SaeCmd {
    /// Train on train-split activations.
    Train(SaeTrainArgs),
    /// Top-activating test rows for every neuron, most class-selective first.
    Report {
        #[arg(long, default_value_t = 10)]
        top_n: usize,
    },
    /// Code values (neurons × timesteps) for one instance.
    Heatmap {
        #[arg(long)]
        instance: usize,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Scale one code, decode, and patch the reconstruction into the MLP output.
    Steer {
        #[arg(long)]
        instance: usize,
        #[arg(long)]
        neuron: usize,
        #[arg(long, default_value_t = 5.0)]
        gain: f32,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
}

#[derive(Args, Debug, Clone)]
pub struct SaeTrainArgs {
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub code_dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Encode raw activations instead of mean-centred ones.
    #[arg(long)]
    pub no_center: bool,
    /// Let decoder rows take any norm.
    #[arg(long)]
    pub free_decoder: bool,
}

#[derive(Args, Debug, Clone)]
pub struct ReproArgs {
    /// Pairs to analyse, best first.
    #[arg(long, default_value_t = 2)]
    pub pairs: usize,
    /// Patches in the top-k table.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Patches in the top-k graph.
    #[arg(long, default_value_t = 5)]
    pub graph_k: usize,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = cli.global;
    let file = match &g.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let cfg = RunConfig::resolve(
        file,
        Overrides {
            out: g.out,
            train_data: g.train_data,
            test_data: g.test_data,
            no_standardize: g.no_standardize,
            seed: g.seed,
            jobs: g.jobs,
            checkpoint: g.checkpoint,
            sae_checkpoint: g.sae_checkpoint,
        },
    )?;
    let mut ctx = commands::Ctx::new(cfg)?;
    match cli.command {
        Command::Train(a) => ctx.train(&a),
        Command::Eval => ctx.eval(),
        Command::Pairs { show } => ctx.pairs(show),
        Command::Patch(PatchCmd::Sweep(a)) => ctx.sweep(&a),
        Command::Patch(PatchCmd::Topk(a)) => ctx.topk(&a),
        Command::Saliency(a) => ctx.saliency(&a),
        Command::Graph(a) => ctx.graph(&a),
        Command::Sae(SaeCmd::Train(a)) => ctx.sae_train(&a),
        Command::Sae(SaeCmd::Report { top_n }) => ctx.sae_report(top_n),
        Command::Sae(SaeCmd::Heatmap { instance, split }) => ctx.sae_heatmap(instance, split),
        Command::Sae(SaeCmd::Steer {
            instance,
            neuron,
            gain,
            split,
        }) => ctx.sae_steer(instance, neuron, gain, split),
        Command::Repro(a) => ctx.repro(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
