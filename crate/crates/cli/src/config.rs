// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: built-in defaults, then the TOML file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use tsmi::model::ModelConfig;
use tsmi::sae::SaeConfig;
use tsmi::trainer::TrainConfig;

pub const DEFAULT_TRAIN: &str = "data/JapaneseVowels/JapaneseVowels_TRAIN.ts";
pub const DEFAULT_TEST: &str = "data/JapaneseVowels/JapaneseVowels_TEST.ts";

/// Keys accepted in `--config` files. Every key is optional.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub out: Option<PathBuf>,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub standardize: Option<bool>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub sae_checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sae: SaeConfig,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Values given on the command line, each overriding the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub no_standardize: bool,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub sae_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    #[serde(skip)]
    pub out: PathBuf,
    #[serde(skip)]
    pub train_data: PathBuf,
    #[serde(skip)]
    pub test_data: PathBuf,
    pub standardize: bool,
    pub seed: u64,
    #[serde(skip)]
    pub jobs: usize,
    #[serde(skip)]
    pub checkpoint: PathBuf,
    #[serde(skip)]
    pub sae_checkpoint: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sae: SaeConfig,
}

impl RunConfig {
    pub fn resolve(file: FileConfig, flags: Overrides) -> Result<Self> {
        let out = flags.out.or(file.out).unwrap_or_else(|| PathBuf::from("out"));
        let seed = flags.seed.or(file.seed).unwrap_or(0);
        let jobs = flags
            .jobs
            .or(file.jobs)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
            .max(1);
        let checkpoint = flags
            .checkpoint
            .or(file.checkpoint)
            .unwrap_or_else(|| out.join("model.tsmi"));
        let sae_checkpoint = flags
            .sae_checkpoint
            .or(file.sae_checkpoint)
            .unwrap_or_else(|| out.join("sae.tsmi"));
        let mut train = file.train;
        train.seed = seed;
        let mut sae = file.sae;
        sae.seed = seed;
        let cfg = Self {
            train_data: flags.train_data.or(file.train_data).unwrap_or_else(|| DEFAULT_TRAIN.into()),
            test_data: flags.test_data.or(file.test_data).unwrap_or_else(|| DEFAULT_TEST.into()),
            standardize: !flags.no_standardize && file.standardize.unwrap_or(true),
            out,
            seed,
            jobs,
            checkpoint,
            sae_checkpoint,
            model: file.model,
            train,
            sae,
        };
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}
