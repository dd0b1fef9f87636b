//! Run configurations: TOML files, command-line overrides and the resolved
//! snapshot written next to every run's outputs.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokdetok_core::detok::DetokConfig;
use tokdetok_core::downstream::{FinetuneConfig, SetupConfig, SetupKind};
use tokdetok_core::lm::{ModelConfig, Objective};
use tokdetok_core::policy::Policy;
use tokdetok_core::tok::TokConfig;
use tokdetok_core::tokenizer::Scheme;
use tokdetok_core::twopt::{TrainConfig, TwoPtConfig};
use tokdetok_core::Real;

use crate::error::{Error, Result};
use crate::io;

pub const SNAPSHOT: &str = "config.resolved.toml";

/// Model shape without the vocabulary size, which comes from the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub objective: Objective,
    pub mask_fraction: Real,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let c = ModelConfig::desk(0, Objective::Masked);
        Self {
            d: c.d,
            layers: c.layers,
            heads: c.heads,
            ff_dim: c.ff_dim,
            max_seq_len: c.max_seq_len,
            objective: c.objective,
            mask_fraction: c.mask_fraction,
        }
    }
}

impl ModelSpec {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d: self.d,
            layers: self.layers,
            heads: self.heads,
            ff_dim: self.ff_dim,
            max_seq_len: self.max_seq_len,
            vocab_size,
            objective: self.objective,
            mask_fraction: self.mask_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerRun {
    pub seed: u64,
    pub corpus: PathBuf,
    pub output: PathBuf,
    pub size: usize,
    pub scheme: Scheme,
}

impl Default for TokenizerRun {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: PathBuf::new(),
            output: PathBuf::from("vocab.txt"),
            size: 1000,
            scheme: Scheme::ContinuationMark,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainRun {
    pub seed: u64,
    pub corpus: PathBuf,
    pub vocab: PathBuf,
    pub output: PathBuf,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SecondPretrainRun {
    pub seed: u64,
    pub corpus: PathBuf,
    /// Base checkpoint to continue from. Without one a fresh model is built
    /// from `vocab` and `model`.
    pub checkpoint: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub output: PathBuf,
    /// Continue plain LM training without Tok/Detok.
    pub lm_only: bool,
    pub model: ModelSpec,
    pub tok: TokConfig,
    pub detok: DetokConfig,
    pub twopt: TwoPtConfig,
    /// Detok samples from sphere vectors written after training.
    pub monitor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneRun {
    pub seed: u64,
    pub task: PathBuf,
    pub checkpoint: PathBuf,
    pub output: PathBuf,
    pub setup: SetupConfig,
    pub hyper: FinetuneConfig,
}

impl Default for FinetuneRun {
    fn default() -> Self {
        Self {
            seed: 0,
            task: PathBuf::new(),
            checkpoint: PathBuf::new(),
            output: PathBuf::new(),
            setup: SetupConfig::new(SetupKind::None),
            hyper: FinetuneConfig::default(),
        }
    }
}

/// Points every seed-bearing field at the run's root seed.
pub trait Resolve {
    fn resolve(&mut self);
}

fn reseed(p: &mut Policy, seed: u64) {
    if let Policy::RandomFraction { seed: s, .. } = p {
        *s = seed;
    }
}

impl Resolve for TokenizerRun {
    fn resolve(&mut self) {}
}

impl Resolve for PretrainRun {
    fn resolve(&mut self) {
        self.train.seed = self.seed;
    }
}

impl Resolve for SecondPretrainRun {
    fn resolve(&mut self) {
        self.twopt.train.seed = self.seed;
        let p = &mut self.twopt.policies;
        for pol in [&mut p.usage, &mut p.loss, &mut p.generation] {
            reseed(pol, self.seed);
        }
    }
}

impl Resolve for FinetuneRun {
    fn resolve(&mut self) {
        self.hyper.seed = self.seed;
        if let SetupKind::Stochastic { seed, .. } = &mut self.setup.kind {
            *seed = self.seed;
        }
    }
}

/// Loads a TOML config, or the defaults when `path` is `None`.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => toml::from_str(&io::read_string(p)?).map_err(|e| Error::Config {
            path: p.to_path_buf(),
            msg: e.to_string(),
        }),
    }
}

pub fn to_toml<T: Serialize>(cfg: &T) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Invalid {
        field: "config",
        reason: e.to_string(),
    })
}

/// Writes the resolved config into `dir`.
pub fn snapshot<T: Serialize>(dir: &Path, cfg: &T) -> Result<()> {
    io::write_string(&dir.join(SNAPSHOT), &to_toml(cfg)?)
}

/// `none`, `all_words`, `all_multi`, `all_no_suff`, `random_fraction:P`,
/// `every_kth:K`.
pub fn parse_policy(s: &str, seed: u64) -> Result<Policy> {
    let bad = || Error::Invalid {
        field: "policy",
        reason: format!("cannot parse `{s}`"),
    };
    let (name, arg) = match s.split_once(':') {
        Some((n, a)) => (n, Some(a)),
        None => (s, None),
    };
    let p = match (name, arg) {
        ("none", None) => Policy::None,
        ("all_words", None) => Policy::AllWords,
        ("all_multi", None) => Policy::AllMulti,
        ("all_no_suff", None) => Policy::AllNoSuff,
        ("random_fraction", Some(a)) => Policy::RandomFraction {
            p: a.parse().map_err(|_| bad())?,
            seed,
        },
        ("every_kth", Some(a)) => Policy::EveryKth {
            k: a.parse().map_err(|_| bad())?,
        },
        _ => return Err(bad()),
    };
    p.validate()?;
    Ok(p)
}

/// `none`, `none_plus_2pt`, `scaffolding`, `stochastic[:P]`, `all_no_suff`,
/// `all_multi`.
pub fn parse_setup(s: &str, seed: u64) -> Result<SetupKind> {
    let bad = || Error::Invalid {
        field: "setup",
        reason: format!("cannot parse `{s}`"),
    };
    Ok(match s.split_once(':') {
        None => match s {
            "none" => SetupKind::None,
            "none_plus_2pt" => SetupKind::NonePlus2pt,
            "scaffolding" => SetupKind::Scaffolding,
            "stochastic" => SetupKind::stochastic(seed),
            "all_no_suff" => SetupKind::AllNoSuff,
            "all_multi" => SetupKind::AllMulti,
            _ => return Err(bad()),
        },
        Some(("stochastic", p)) => SetupKind::Stochastic {
            p: p.parse().map_err(|_| bad())?,
            seed,
        },
        _ => return Err(bad()),
    })
}
