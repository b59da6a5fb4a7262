//! Few-step chunk samplers and the chunk-by-chunk autoregressive rollout.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::neighborhood::NoisePlan;
use crate::rewards::PromptSpec;
use crate::toygen::{ContextCache, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Predict `x0_hat`, re-noise to the next timestep, repeat.
    Consistency,
    /// Euler integration of the velocity implied by `x0_hat`.
    FlowOde,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Strictly decreasing, positive.
    pub timesteps: Vec<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Consistency,
            timesteps: vec![1.0, 0.6, 0.3],
        }
    }
}

impl SamplerConfig {
    pub fn steps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.timesteps.is_empty() {
            return Err(invalid("sampler needs at least one timestep"));
        }
        if self.timesteps.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
            return Err(invalid(format!("timesteps must be positive: {:?}", self.timesteps)));
        }
        if self.timesteps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(invalid(format!(
                "timesteps must be strictly decreasing: {:?}",
                self.timesteps
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub x_t: Vec<f64>,
    pub x0_pred: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkTrajectory {
    pub steps: Vec<StepRecord>,
    pub clean: Vec<f64>,
}

/// Denoise one chunk from `init_noise` under context `ctx`.
pub fn sample_chunk(
    params: &ModelParams,
    ctx: &ContextCache,
    init_noise: &[f64],
    solver_noises: &[Vec<f64>],
    cfg: &SamplerConfig,
) -> Result<ChunkTrajectory> {
    cfg.validate()?;
    let ts = &cfg.timesteps;
    let n = ts.len();
    if cfg.kind == SamplerKind::Consistency && solver_noises.len() != n - 1 {
        return Err(invalid(format!(
            "consistency sampler with {n} steps needs {} solver noises, got {}",
            n - 1,
            solver_noises.len()
        )));
    }
    let mut x = init_noise.to_vec();
    let mut steps = Vec::with_capacity(n);
    for k in 0..n {
        let pred = params.predict_x0(&x, ctx, ts[k])?;
        let next = if k + 1 < n {
            Some(match cfg.kind {
                SamplerKind::Consistency => {
                    let z = &solver_noises[k];
                    if z.len() != x.len() {
                        return Err(invalid("solver noise length mismatch"));
                    }
                    pred.iter().zip(z).map(|(p, zi)| p + ts[k + 1] * zi).collect::<Vec<_>>()
                }
                SamplerKind::FlowOde => {
                    let dt = ts[k + 1] - ts[k];
                    x.iter()
                        .zip(&pred)
                        .map(|(xi, pi)| xi + dt * ((xi - pi) / ts[k]))
                        .collect()
                }
            })
        } else {
            None
        };
        steps.push(StepRecord {
            t: ts[k],
            x_t: std::mem::take(&mut x),
            x0_pred: pred,
        });
        if let Some(nx) = next {
            x = nx;
        }
    }
    // The last Euler step lands on t = 0, which is exactly the prediction.
    let clean = steps[n - 1].x0_pred.clone();
    Ok(ChunkTrajectory { steps, clean })
}

/// A completed (or partially completed) autoregressive sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceLatents {
    pub chunks: Vec<Vec<f64>>,
    pub trajectories: Vec<ChunkTrajectory>,
    /// `contexts[q]` is the cache chunk `q` was generated under.
    pub contexts: Vec<ContextCache>,
}

impl SequenceLatents {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    /// All chunks concatenated.
    pub fn flat(&self) -> Vec<f64> {
        self.chunks.concat()
    }
}

fn check_plan(plan: &NoisePlan, cfg: &SamplerConfig, chunks: usize, dim: usize) -> Result<()> {
    if plan.chunks() < chunks {
        return Err(invalid(format!(
            "noise plan covers {} chunks, rollout needs {chunks}",
            plan.chunks()
        )));
    }
    if plan.steps() != cfg.steps() {
        return Err(invalid(format!(
            "noise plan built for {} steps, sampler has {}",
            plan.steps(),
            cfg.steps()
        )));
    }
    if plan.chunk_dim() != dim {
        return Err(invalid("noise plan chunk dimension mismatch"));
    }
    Ok(())
}

/// Generate chunks `start..chunks` (0-based) from context `ctx`.
pub fn rollout_from(
    params: &ModelParams,
    ctx: ContextCache,
    plan: &NoisePlan,
    cfg: &SamplerConfig,
    start: usize,
    chunks: usize,
) -> Result<SequenceLatents> {
    check_plan(plan, cfg, chunks, params.dims.chunk_dim)?;
    let mut ctx = ctx;
    let mut out = SequenceLatents {
        chunks: Vec::new(),
        trajectories: Vec::new(),
        contexts: Vec::new(),
    };
    for q in start..chunks {
        let traj = sample_chunk(params, &ctx, &plan.init_noises[q], &plan.solver_noises[q], cfg)?;
        let next = params.extend_context(&ctx, &traj.clean)?;
        out.chunks.push(traj.clean.clone());
        out.trajectories.push(traj);
        out.contexts.push(std::mem::replace(&mut ctx, next));
    }
    Ok(out)
}

/// Full `chunks`-long rollout for `prompt` under `plan`.
pub fn rollout_sequence(
    params: &ModelParams,
    prompt: &PromptSpec,
    plan: &NoisePlan,
    cfg: &SamplerConfig,
    chunks: usize,
) -> Result<SequenceLatents> {
    if chunks == 0 {
        return Err(invalid("sequence must have at least one chunk"));
    }
    let ctx = ContextCache::initial(&prompt.target, params.dims.context_dim);
    rollout_from(params, ctx, plan, cfg, 0, chunks)
}
