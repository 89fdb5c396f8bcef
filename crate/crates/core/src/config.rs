//! Run configuration, read from a TOML file with dotted sections.
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! path = "panel.csv"
//! horizon = 5
//! split.train = ["2016-01-04", "2017-06-30"]
//! split.valid = ["2017-07-03", "2017-12-29"]
//! split.test = ["2018-01-02", "2018-12-31"]
//!
//! [shaping]
//! kind = "tlrs"
//! demos_path = "alpha101_demos.txt"
//! ```

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::data::MissingPolicy;
use crate::policy::PolicyConfig;
use crate::ppo::PpoConfig;
use crate::shaping::{Encoding, ShapingKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub vocab: VocabConfig,
    #[serde(default)]
    pub shaping: ShapingConfig,
    #[serde(default)]
    pub centering: CenteringConfig,
    #[serde(default)]
    pub pool: PoolConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_seed() -> u64 {
    1
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: default_seed(),
            data: DataConfig::default(),
            vocab: VocabConfig::default(),
            shaping: ShapingConfig::default(),
            centering: CenteringConfig::default(),
            pool: PoolConfig::default(),
            policy: PolicyConfig::default(),
            ppo: PpoConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Panel CSV. Without it a synthetic panel is generated from `synth`.
    pub path: Option<PathBuf>,
    /// Target CSV (`date,symbol,target`) aligned to the panel. Without it the
    /// targets are forward close-to-close returns over `horizon` days.
    pub targets_path: Option<PathBuf>,
    pub horizon: usize,
    pub missing: MissingPolicy,
    /// Inclusive date ranges. Without them the days after `warmup` are split
    /// 60 / 20 / 20.
    pub split: Option<SplitConfig>,
    pub warmup: usize,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            targets_path: None,
            horizon: 5,
            missing: MissingPolicy::Reject,
            split: None,
            warmup: 100,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train: [NaiveDate; 2],
    pub valid: [NaiveDate; 2],
    pub test: [NaiveDate; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Seed of the generated panel; defaults to the run seed.
    pub seed: Option<u64>,
    pub n_assets: usize,
    pub n_days: usize,
    /// Planted formula in RPN text.
    pub planted: Option<String>,
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: None,
            n_assets: 20,
            n_days: 750,
            planted: None,
            noise_std: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    /// Longest episode in tokens, SEP included.
    pub max_len: usize,
    /// Optional token table file replacing the built-in one.
    pub table: Option<PathBuf>,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            max_len: crate::expr::DEFAULT_MAX_LEN,
            table: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ShapingConfig {
    pub kind: ShapingKind,
    pub demos_path: Option<PathBuf>,
    /// State encoding for the distance-based shapers.
    pub encoding: Encoding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CenteringConfig {
    pub enabled: bool,
    pub beta: f64,
}

impl Default for CenteringConfig {
    fn default() -> Self {
        CenteringConfig {
            enabled: true,
            beta: crate::centering::DEFAULT_BETA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    pub capacity: usize,
    pub lr: f64,
    pub steps: usize,
    pub nan_tolerance: f64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            capacity: 10,
            lr: 1e-2,
            steps: 500,
            nan_tolerance: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub eval_interval: u64,
    /// Seeds run one after another, each in its own output subdirectory.
    /// Empty means just the top-level seed.
    pub seeds: Vec<u64>,
    /// Use the thread pool for data-parallel work.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 200_000,
            eval_interval: 2000,
            seeds: Vec::new(),
            parallel: true,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Reads and validates a config file; relative paths inside it are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<RunConfig, ConfigLoadError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigLoadError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::from_toml(&text).map_err(ConfigLoadError::Invalid)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate().map_err(ConfigLoadError::Invalid)?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.data.path);
        fix(&mut self.data.targets_path);
        fix(&mut self.vocab.table);
        fix(&mut self.shaping.demos_path);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks ranges and cross-field requirements.
    pub fn validate(&self) -> Result<(), String> {
        let mut errs = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                errs.push(msg.to_string());
            }
        };
        need(self.vocab.max_len >= 2, "vocab.max_len must be at least 2");
        need(self.data.horizon >= 1, "data.horizon must be at least 1");
        need(
            self.data.synth.n_assets >= 2 || self.data.path.is_some(),
            "data.synth.n_assets must be at least 2",
        );
        need(
            self.data.synth.noise_std >= 0.0 && self.data.synth.noise_std.is_finite(),
            "data.synth.noise_std must be finite and non-negative",
        );
        need(
            self.shaping.kind == ShapingKind::None || self.shaping.demos_path.is_some(),
            "shaping.demos_path is required when shaping.kind is not none",
        );
        need(
            self.centering.beta > 0.0 && self.centering.beta <= 1.0,
            "centering.beta must be in (0, 1]",
        );
        need(self.pool.capacity >= 1, "pool.capacity must be at least 1");
        need(self.pool.lr > 0.0, "pool.lr must be positive");
        need(
            (0.0..=1.0).contains(&self.pool.nan_tolerance),
            "pool.nan_tolerance must be in [0, 1]",
        );
        need(
            self.policy.hidden >= 1 && self.policy.embed_dim >= 1,
            "policy sizes must be positive",
        );
        need(
            self.policy.head_hidden >= 1,
            "policy.head_hidden must be positive",
        );
        need(
            (0.0..1.0).contains(&self.policy.dropout),
            "policy.dropout must be in [0, 1)",
        );
        need(self.ppo.clip > 0.0, "ppo.clip must be positive");
        need(self.ppo.epochs >= 1, "ppo.epochs must be at least 1");
        need(
            self.ppo.batch_steps >= 1,
            "ppo.batch_steps must be at least 1",
        );
        need(
            self.ppo.minibatch_steps >= 1,
            "ppo.minibatch_steps must be at least 1",
        );
        need(self.ppo.lr > 0.0, "ppo.lr must be positive");
        need(
            self.ppo.gamma > 0.0 && self.ppo.gamma <= 1.0,
            "ppo.gamma must be in (0, 1]",
        );
        need(
            (0.0..=1.0).contains(&self.ppo.gae_lambda),
            "ppo.gae_lambda must be in [0, 1]",
        );
        need(
            self.train.eval_interval >= 1,
            "train.eval_interval must be at least 1",
        );
        if let Some(s) = &self.data.split {
            for (name, r) in [("train", &s.train), ("valid", &s.valid), ("test", &s.test)] {
                if r[0] > r[1] {
                    errs.push(format!("data.split.{name} ends before it starts"));
                }
            }
            if s.train[1] >= s.valid[0] || s.valid[1] >= s.test[0] {
                errs.push("data.split ranges must be ordered and disjoint".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs.join("; "))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigLoadError {
    Io(String),
    Invalid(String),
}
