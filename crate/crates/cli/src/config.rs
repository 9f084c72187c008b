//! TOML run configuration and its merge with command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fewdoc::encoding::ToyEncoderConfig;
use fewdoc::model::{EncoderSpec, Hyperparameters, ModelConfig, TaskFamily};
use fewdoc::objectives::ContrastiveVariant;
use fewdoc::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Corpus, catalog and episode locations. Relative paths resolve against
/// the config file's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub catalog: Option<PathBuf>,
    pub cross_catalog: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub train_corpus: Option<PathBuf>,
    pub dev_corpus: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    pub cross_corpus: Option<PathBuf>,
    pub dev_episodes: Option<PathBuf>,
}

/// Model keys; unset hyperparameters fall back to the task-family defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub top_k_percent: Option<f64>,
    pub tau: Option<f64>,
    pub n_nota: Option<usize>,
    pub alpha: Option<f64>,
    pub lambda: Option<f64>,
    pub contrastive: Option<ContrastiveVariant>,
    pub no_tnpg: Option<bool>,
    pub no_ibpc: Option<bool>,
    pub freeze_relation_encoder: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub task_family: Option<TaskFamily>,
    pub encoder: Option<String>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelSection,
    pub toy: Option<ToyEncoderConfig>,
    pub train: Option<TrainConfig>,
}

/// Flags shared by every subcommand.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `toy` or `pretrained:<name>`.
    #[arg(long)]
    pub encoder: Option<String>,
    /// `in_domain` or `cross_domain`.
    #[arg(long)]
    pub task_family: Option<String>,
}

/// Model-level switches given on the command line.
#[derive(Clone, Copy, Debug, Default)]
pub struct ModelOverrides {
    pub no_rcl: bool,
    pub no_ibpc: bool,
    pub scl: bool,
    pub no_tnpg: bool,
}

/// Fully merged settings.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Resolved {
    pub seed: u64,
    pub task_family: TaskFamily,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn resolve_paths(data: &mut DataConfig, base: &Path) {
    for p in [
        &mut data.catalog,
        &mut data.cross_catalog,
        &mut data.split,
        &mut data.train_corpus,
        &mut data.dev_corpus,
        &mut data.test_corpus,
        &mut data.cross_corpus,
        &mut data.dev_episodes,
    ]
    .into_iter()
    .flatten()
    {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| fewdoc::Error::io(path, e))
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg: RunConfig = toml::from_str(&text)
        .map_err(|e| fewdoc::Error::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    resolve_paths(&mut cfg.data, base);
    if let Some(out) = &cfg.out {
        if out.is_relative() {
            cfg.out = Some(base.join(out));
        }
    }
    Ok(cfg)
}

fn config_error(msg: String) -> anyhow::Error {
    fewdoc::Error::Config(msg).into()
}

/// CLI flag > config file > task-family default.
pub fn resolve(common: &CommonArgs, overrides: ModelOverrides) -> Result<Resolved> {
    let file = match &common.config {
        Some(path) => load_run_config(path)?,
        None => RunConfig::default(),
    };
    let task_family = match &common.task_family {
        Some(s) => s.parse::<TaskFamily>()?,
        None => file.task_family.unwrap_or(TaskFamily::InDomain),
    };
    let seed = common.seed.or(file.seed).unwrap_or(0);
    let encoder: EncoderSpec = match common.encoder.as_deref().or(file.encoder.as_deref()) {
        Some(s) => s.parse()?,
        None => EncoderSpec::Toy,
    };

    let defaults = Hyperparameters::for_family(task_family);
    let m = &file.model;
    let mut hyper = Hyperparameters {
        top_k_percent: m.top_k_percent.unwrap_or(defaults.top_k_percent),
        tau: m.tau.unwrap_or(defaults.tau),
        n_nota: m.n_nota.unwrap_or(defaults.n_nota),
        alpha: m.alpha.unwrap_or(defaults.alpha),
        lambda: m.lambda.unwrap_or(defaults.lambda),
    };
    let mut contrastive = m.contrastive.unwrap_or_default();
    if overrides.scl && overrides.no_rcl {
        bail!(config_error("--scl and --no-rcl are mutually exclusive".into()));
    }
    if overrides.scl {
        contrastive = ContrastiveVariant::Scl;
    }
    if overrides.no_rcl {
        contrastive = ContrastiveVariant::Off;
        hyper.lambda = 0.0;
    }
    if contrastive == ContrastiveVariant::Off {
        hyper.lambda = 0.0;
    }
    hyper.validate()?;

    let model = ModelConfig {
        encoder,
        toy: file.toy.clone().unwrap_or_default(),
        seed,
        hyper,
        contrastive,
        disable_tnpg: overrides.no_tnpg || m.no_tnpg.unwrap_or(false),
        disable_ibpc: overrides.no_ibpc || m.no_ibpc.unwrap_or(false),
        freeze_relation_encoder: m.freeze_relation_encoder.unwrap_or(false),
    };
    let mut train = file.train.clone().unwrap_or_default();
    if let Some(s) = common.seed.or(file.seed) {
        train.seed = s;
    }
    train.validate()?;

    Ok(Resolved {
        seed,
        task_family,
        out: common.out.clone().or(file.out.clone()),
        data: file.data,
        model,
        train,
    })
}

impl Resolved {
    pub fn out_required(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| config_error("an output location is required (--out or `out` in the config)".into()))
    }
}
