//! Experiment configuration: every knob of a run in one TOML document with
//! dotted section keys (`copo.clip_eps = 1e-4`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::DEFAULT_SCALES;
use crate::copo::CopoConfig;
use crate::error::{Error, Result};
use crate::optim::OptimizerKind;
use crate::rewards::{PromptSpec, RewardKind, RewardSpec};
use crate::rollout::{ArcopoConfig, EvalSuite};
use crate::semipolicy::DEFAULT_BUFFER_GROUPS;
use crate::toygen::{PretrainConfig, SamplerConfig};

/// Iteration counts of each stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub pretrain_steps: usize,
    /// On-policy and SDE iterations.
    pub iterations: usize,
    /// Buffer updates for the semi-on-policy and off-policy modes.
    pub semi_steps: usize,
    pub buffer_groups: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            pretrain_steps: 4000,
            iterations: 100,
            semi_steps: 300,
            buffer_groups: DEFAULT_BUFFER_GROUPS,
        }
    }
}

/// Training prompts are `train_base ..`, held-out prompts `held_out_base ..`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub train_base: u64,
    pub train_count: usize,
    pub held_out_base: u64,
    pub held_out_count: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            train_base: 1000,
            train_count: 10,
            held_out_base: 5000,
            held_out_count: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub samples_per_prompt: usize,
    /// Fixed independently of the root seed so runs with different seeds
    /// are scored on the same draws.
    pub seed: u64,
    /// Reward kinds reported on held-out prompts as degradation monitors.
    pub monitors: Vec<RewardKind>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples_per_prompt: 16,
            seed: 77,
            monitors: vec![RewardKind::Quality, RewardKind::Align],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: 8.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropyConfig {
    /// 1-based chunks whose noise sites are substituted.
    pub pivots: Vec<usize>,
    pub plans: usize,
    pub trials: usize,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self {
            pivots: vec![1, 4],
            plans: 24,
            trials: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub scales: Vec<f64>,
    /// Allowed relative held-out degradation for a scale to count as
    /// non-degrading.
    pub held_out_tolerance: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            scales: DEFAULT_SCALES.to_vec(),
            held_out_tolerance: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Artifact directory. Not part of the config hash.
    pub out: PathBuf,
    pub chunks: usize,
    pub sampler: SamplerConfig,
    pub copo: CopoConfig,
    pub reward: RewardSpec,
    pub pretrain: PretrainConfig,
    pub schedule: Schedule,
    pub prompts: PromptConfig,
    pub eval: EvalConfig,
    pub adapters: AdapterConfig,
    pub entropy: EntropyConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    /// Toy-scale training settings: the optimizer, step size and reward are
    /// tuned for the small generator, everything else in `copo` keeps the
    /// module defaults.
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            chunks: 6,
            sampler: SamplerConfig::default(),
            copo: CopoConfig {
                learning_rate: 2e-3,
                optimizer: OptimizerKind::adam(),
                ..CopoConfig::default()
            },
            reward: RewardSpec {
                motion_step: 6.0,
                ..RewardSpec::of_kind(RewardKind::Motion)
            },
            pretrain: PretrainConfig::default(),
            schedule: Schedule::default(),
            prompts: PromptConfig::default(),
            eval: EvalConfig::default(),
            adapters: AdapterConfig::default(),
            entropy: EntropyConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn config_err(msg: impl std::fmt::Display) -> Error {
    Error::Config(msg.to_string())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("config {}", path.display())),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the serialized config with `out` cleared: two runs that
    /// differ only in where they write share a hash.
    pub fn hash(&self) -> String {
        let canonical = Self {
            out: PathBuf::new(),
            ..self.clone()
        };
        let d = Sha256::digest(canonical.to_toml().as_bytes());
        d.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Every failure is reported as an invalid config.
    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|e| match e {
            Error::InvalidArgument(m) | Error::Config(m) => config_err(m),
            other => other,
        })
    }

    fn check(&self) -> Result<()> {
        self.arcopo().validate()?;
        self.pretrain.dims.validate()?;
        if self.eval.samples_per_prompt == 0 || self.prompts.train_count == 0 || self.prompts.held_out_count == 0 {
            return Err(config_err("prompt counts and eval samples must be positive"));
        }
        let train = self.prompts.train_base..self.prompts.train_base + self.prompts.train_count as u64;
        let held = self.prompts.held_out_base..self.prompts.held_out_base + self.prompts.held_out_count as u64;
        if train.start < held.end && held.start < train.end {
            return Err(config_err("held-out prompt seeds overlap the training prompts"));
        }
        if self.schedule.buffer_groups == 0 {
            return Err(config_err("schedule.buffer_groups must be positive"));
        }
        if self.adapters.rank == 0 || !(self.adapters.alpha.is_finite()) {
            return Err(config_err("adapters.rank must be positive and alpha finite"));
        }
        if self.entropy.pivots.iter().any(|&p| p == 0 || p > self.chunks) {
            return Err(config_err(format!("entropy.pivots must lie in 1..={}", self.chunks)));
        }
        if self.sweep.scales.is_empty() || self.sweep.scales.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(config_err("sweep.scales must be non-empty and inside [0, 1]"));
        }
        if !(self.sweep.held_out_tolerance >= 0.0) {
            return Err(config_err("sweep.held_out_tolerance must be non-negative"));
        }
        Ok(())
    }

    pub fn arcopo(&self) -> ArcopoConfig {
        ArcopoConfig {
            chunks: self.chunks,
            sampler: self.sampler.clone(),
            copo: self.copo.clone(),
            reward: self.reward.clone(),
        }
    }

    pub fn train_prompts(&self) -> Result<Vec<PromptSpec>> {
        PromptSpec::set(
            self.prompts.train_base,
            self.prompts.train_count,
            self.pretrain.dims.chunk_dim,
        )
    }

    pub fn eval_suite(&self) -> Result<EvalSuite> {
        Ok(EvalSuite {
            train_prompts: self.train_prompts()?,
            held_out_prompts: PromptSpec::set(
                self.prompts.held_out_base,
                self.prompts.held_out_count,
                self.pretrain.dims.chunk_dim,
            )?,
            samples_per_prompt: self.eval.samples_per_prompt,
            seed: self.eval.seed,
            chunks: self.chunks,
            sampler: self.sampler.clone(),
            reward: self.reward.clone(),
            monitors: self.eval.monitors.iter().map(|k| RewardSpec::of_kind(*k)).collect(),
        })
    }

    pub fn monitor_names(&self) -> Vec<String> {
        self.eval
            .monitors
            .iter()
            .map(|k| {
                serde_json::to_value(k)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_owned))
                    .unwrap_or_default()
            })
            .collect()
    }
}
