//! Synthetic sequence-level rewards.
//!
//! Every kind is bounded above by zero:
//!
//! * `align`: `-‖mean(chunks) - target‖²`, maximal when the chunk mean hits
//!   the prompt target.
//! * `motion`: `-Σ_p (‖x_{p+1} - x_p‖ - step)²`, maximal when every
//!   consecutive step has length `step`.
//! * `quality`: `-Σ_p (‖x_p‖ - norm)²`, maximal when every chunk has norm
//!   `norm`.
//! * `composite`: weighted sum of the three.
//! * `random`: a uniform draw in `(-1, 0)` keyed by a hash of the sequence,
//!   carrying no usable signal. Used as the null control.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::numerics::{vecops, RngStream};

/// Toy prompt: a seeded target vector for the chunk mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub prompt_seed: u64,
    pub target: Vec<f64>,
}

pub const PROMPT_TARGET_SCALE: f64 = 0.5;

impl PromptSpec {
    pub fn new(prompt_seed: u64, chunk_dim: usize) -> Result<Self> {
        let mut s = RngStream::at(prompt_seed, "prompt/target");
        let target = s
            .gaussian(chunk_dim)?
            .into_iter()
            .map(|z| PROMPT_TARGET_SCALE * z)
            .collect();
        Ok(Self { prompt_seed, target })
    }

    /// `count` prompts with seeds `base, base+1, ...`.
    pub fn set(base: u64, count: usize, chunk_dim: usize) -> Result<Vec<Self>> {
        (0..count as u64).map(|i| Self::new(base + i, chunk_dim)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Align,
    Motion,
    Quality,
    Composite,
    Random,
}

impl std::str::FromStr for RewardKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "align" => Self::Align,
            "motion" => Self::Motion,
            "quality" => Self::Quality,
            "composite" => Self::Composite,
            "random" => Self::Random,
            other => return Err(invalid(format!("unknown reward kind `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSpec {
    pub kind: RewardKind,
    /// Composite weights for (align, motion, quality).
    pub weights: [f64; 3],
    pub motion_step: f64,
    pub quality_norm: f64,
    pub random_seed: u64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            kind: RewardKind::Align,
            weights: [1.0, 1.0, 1.0],
            motion_step: 1.0,
            quality_norm: 1.5,
            random_seed: 0,
        }
    }
}

impl RewardSpec {
    pub fn of_kind(kind: RewardKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !vecops::all_finite(&self.weights) {
            return Err(invalid("composite weights must be finite"));
        }
        if !self.motion_step.is_finite() || !self.quality_norm.is_finite() {
            return Err(invalid("reward parameters must be finite"));
        }
        Ok(())
    }
}

fn align(chunks: &[Vec<f64>], target: &[f64]) -> f64 {
    let n = chunks.len() as f64;
    let mean: Vec<f64> = (0..target.len())
        .map(|i| chunks.iter().map(|c| c[i]).sum::<f64>() / n)
        .collect();
    -vecops::sq_dist(&mean, target)
}

fn motion(chunks: &[Vec<f64>], step: f64) -> f64 {
    -chunks
        .windows(2)
        .map(|w| {
            let d = vecops::sq_dist(&w[1], &w[0]).sqrt() - step;
            d * d
        })
        .sum::<f64>()
}

fn quality(chunks: &[Vec<f64>], norm: f64) -> f64 {
    -chunks
        .iter()
        .map(|c| {
            let d = vecops::norm(c) - norm;
            d * d
        })
        .sum::<f64>()
}

fn hashed_uniform(chunks: &[Vec<f64>], seed: u64) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for c in chunks {
        for x in c {
            h.update(x.to_bits().to_le_bytes());
        }
    }
    let digest = h.finalize();
    let mut key = [0u8; 8];
    key.copy_from_slice(&digest[..8]);
    RngStream::new(u64::from_le_bytes(key)).child("reward").uniform()
}

/// Sequence-level reward of a complete `expected_chunks`-long sequence.
pub fn eval_reward(chunks: &[Vec<f64>], prompt: &PromptSpec, spec: &RewardSpec, expected_chunks: usize) -> Result<f64> {
    if chunks.len() != expected_chunks || chunks.is_empty() {
        return Err(invalid(format!(
            "reward needs a complete sequence of {expected_chunks} chunks, got {}",
            chunks.len()
        )));
    }
    let dim = prompt.target.len();
    if chunks.iter().any(|c| c.len() != dim) {
        return Err(invalid("chunk dimension does not match the prompt target"));
    }
    Ok(match spec.kind {
        RewardKind::Align => align(chunks, &prompt.target),
        RewardKind::Motion => motion(chunks, spec.motion_step),
        RewardKind::Quality => quality(chunks, spec.quality_norm),
        RewardKind::Composite => {
            let [wa, wm, wq] = spec.weights;
            wa * align(chunks, &prompt.target)
                + wm * motion(chunks, spec.motion_step)
                + wq * quality(chunks, spec.quality_norm)
        }
        RewardKind::Random => -hashed_uniform(chunks, spec.random_seed),
    })
}
