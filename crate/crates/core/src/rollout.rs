//! One AR-CoPO iteration (pivot, shared prefix, forked branches, rewards) and
//! the on-policy and SDE training loops built on it.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::copo::{
    copo_update, group_advantages, resolve_temperature, sde_grpo_update, select_anchors, CopoConfig, Learner, SdeGroup,
    UpdateStats,
};
use crate::error::{invalid, numeric, Result};
use crate::neighborhood::{fork, perturb, BranchPlans, NoiseNeighborhood, NoisePlan, Provenance};
use crate::numerics::{vecops, RngStream};
use crate::rewards::{eval_reward, PromptSpec, RewardSpec};
use crate::toygen::{
    rollout_from, rollout_sequence, ChunkTrajectory, ContextCache, ModelParams, SamplerConfig, SequenceLatents,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArcopoConfig {
    /// Sequence length L in chunks.
    pub chunks: usize,
    pub sampler: SamplerConfig,
    pub copo: CopoConfig,
    pub reward: RewardSpec,
}

impl Default for ArcopoConfig {
    fn default() -> Self {
        Self {
            chunks: 6,
            sampler: SamplerConfig::default(),
            copo: CopoConfig::default(),
            reward: RewardSpec::default(),
        }
    }
}

impl ArcopoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunks == 0 {
            return Err(invalid("chunks must be positive"));
        }
        self.sampler.validate()?;
        self.copo.validate()?;
        self.reward.validate()
    }
}

/// The stored pivot-chunk group: everything needed to replay the update
/// without new rollouts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    /// 1-based pivot chunk.
    pub pivot: usize,
    /// Context the pivot chunk was generated under.
    pub context: ContextCache,
    pub base_noise: Vec<f64>,
    pub member_noises: Vec<Vec<f64>>,
    /// Pivot-chunk trajectories; `x0_pred` are old-policy predictions.
    pub candidates: Vec<ChunkTrajectory>,
    pub rewards: Vec<f64>,
    pub prompt: PromptSpec,
    pub sampler: SamplerConfig,
    pub provenance: Provenance,
}

/// G branches forked at one pivot from a shared prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchGroup {
    pub pivot: usize,
    pub neighborhood: NoiseNeighborhood,
    pub plans: BranchPlans,
    /// Chunks `1..p-1`, generated once.
    pub prefix: SequenceLatents,
    /// Per branch, chunks `p..L`.
    pub branches: Vec<SequenceLatents>,
    pub rewards: Vec<f64>,
}

impl BranchGroup {
    pub fn group_size(&self) -> usize {
        self.branches.len()
    }

    /// Full chunk list of branch `i`.
    pub fn sequence(&self, i: usize) -> Vec<Vec<f64>> {
        let mut out = self.prefix.chunks.clone();
        out.extend(self.branches[i].chunks.iter().cloned());
        out
    }
}

/// Generate the shared prefix once, then complete every branch plan from the
/// pivot onwards and score the full sequences.
pub fn fork_rollouts(
    params: &ModelParams,
    prompt: &PromptSpec,
    plan: &NoisePlan,
    pivot: usize,
    hood: NoiseNeighborhood,
    cfg: &ArcopoConfig,
) -> Result<BranchGroup> {
    let plans = fork(plan, pivot, &hood)?;
    let ctx0 = ContextCache::initial(&prompt.target, params.dims.context_dim);
    let prefix = rollout_from(params, ctx0.clone(), plan, &cfg.sampler, 0, pivot - 1)?;
    let ctx = match prefix.chunks.last() {
        Some(last) => params.extend_context(prefix.contexts.last().expect("context per chunk"), last)?,
        None => ctx0,
    };
    let branches = plans
        .plans
        .par_iter()
        .map(|p| rollout_from(params, ctx.clone(), p, &cfg.sampler, pivot - 1, cfg.chunks))
        .collect::<Result<Vec<_>>>()?;
    let mut group = BranchGroup {
        pivot,
        neighborhood: hood,
        plans,
        prefix,
        branches,
        rewards: Vec::new(),
    };
    group.rewards = (0..group.group_size())
        .map(|i| eval_reward(&group.sequence(i), prompt, &cfg.reward, cfg.chunks))
        .collect::<Result<Vec<_>>>()?;
    Ok(group)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub prompt_seed: u64,
    /// 1-based pivot; 0 for the SDE baseline, which has none.
    pub pivot: usize,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub objective: f64,
    pub ratio_mean: f64,
    pub ratio_max: f64,
    pub clip_frac: f64,
    pub tau: f64,
    /// Excluded from artifacts so reruns stay byte-identical.
    #[serde(skip)]
    pub wall_time_ms: f64,
}

impl IterationRecord {
    pub(crate) fn new(
        iter: usize,
        prompt_seed: u64,
        pivot: usize,
        rewards: Vec<f64>,
        cfg: &CopoConfig,
    ) -> Result<Self> {
        let adv = group_advantages(&rewards, cfg.degenerate_std_threshold)?;
        Ok(Self {
            iter,
            prompt_seed,
            pivot,
            reward_mean: vecops::mean(&rewards),
            reward_std: vecops::pop_std(&rewards),
            rewards,
            advantages: adv.values,
            ..Self::default()
        })
    }

    pub(crate) fn absorb(&mut self, s: &UpdateStats) {
        self.objective = s.objective;
        self.ratio_mean = s.ratio_mean;
        self.ratio_max = s.ratio_max;
        self.clip_frac = s.clip_frac;
        self.tau = s.tau;
    }
}

/// One iteration without the update: sample the pivot, share the prefix, fork,
/// complete and score. Rollouts use `params`; the stored predictions are
/// those of `old_params` on the stored inputs.
pub fn arcopo_iteration(
    params: &ModelParams,
    old_params: &ModelParams,
    prompt: &PromptSpec,
    cfg: &ArcopoConfig,
    stream: &RngStream,
) -> Result<(ReplayEntry, IterationRecord)> {
    cfg.validate()?;
    if params.dims != old_params.dims {
        return Err(invalid("current and old parameters have different dimensions"));
    }
    let pivot = stream.child("pivot").index(cfg.chunks)? + 1;
    let plan = NoisePlan::generate(
        &stream.child("plan"),
        cfg.chunks,
        cfg.sampler.steps(),
        params.dims.chunk_dim,
    )?;
    let hood = perturb(
        &plan.init_noises[pivot - 1],
        cfg.copo.sigma,
        cfg.copo.group_size,
        &stream.child("hood"),
    )?;
    let group = fork_rollouts(params, prompt, &plan, pivot, hood, cfg)?;
    let context = group.branches[0].contexts[0].clone();
    let mut candidates: Vec<ChunkTrajectory> = group.branches.iter().map(|b| b.trajectories[0].clone()).collect();
    if old_params.values != params.values {
        for c in &mut candidates {
            for st in &mut c.steps {
                st.x0_pred = old_params.predict_x0(&st.x_t, &context, st.t)?;
            }
        }
    }
    let record = IterationRecord::new(0, prompt.prompt_seed, pivot, group.rewards.clone(), &cfg.copo)?;
    let entry = ReplayEntry {
        pivot,
        context,
        base_noise: group.neighborhood.base.clone(),
        member_noises: group.neighborhood.members.clone(),
        candidates,
        rewards: group.rewards,
        prompt: prompt.clone(),
        sampler: cfg.sampler.clone(),
        provenance: Provenance {
            root_seed: stream.root_seed(),
            label: stream.path(),
        },
    };
    Ok((entry, record))
}

pub(crate) fn non_empty_prompts(prompts: &[PromptSpec]) -> Result<()> {
    if prompts.is_empty() {
        return Err(invalid("prompt set is empty"));
    }
    Ok(())
}

/// Fresh rollouts from the evolving policy every iteration, prompts taken
/// round-robin. Returns one record per iteration.
pub fn train_on_policy<L: Learner + ?Sized>(
    learner: &mut L,
    prompts: &[PromptSpec],
    cfg: &ArcopoConfig,
    iters: usize,
    stream: &RngStream,
) -> Result<Vec<IterationRecord>> {
    cfg.validate()?;
    non_empty_prompts(prompts)?;
    let mut opt = cfg.copo.optimizer(learner.trainable().len());
    let mut curve = Vec::with_capacity(iters);
    for n in 1..=iters {
        let started = Instant::now();
        let s = stream.child(format!("iter.{n}"));
        let prompt = &prompts[(n - 1) % prompts.len()];
        let current = learner.effective()?;
        let (entry, mut rec) = arcopo_iteration(&current, &current, prompt, cfg, &s)?;
        rec.iter = n;
        if !rec.advantages.iter().all(|a| *a == 0.0) {
            let tau = resolve_temperature(&entry, &cfg.copo)?;
            let anchors = select_anchors(cfg.copo.group_size, cfg.copo.anchor_batch, &s.child("anchors"))?;
            let stats = copo_update(learner, &mut opt, &entry, &cfg.copo, tau, true, &anchors)
                .map_err(|e| numeric(format!("on-policy iteration {n}: {e}")))?;
            rec.absorb(&stats);
        }
        rec.wall_time_ms = started.elapsed().as_secs_f64() * 1e3;
        curve.push(rec);
    }
    Ok(curve)
}

/// G full rollouts that share every initial noise; each branch draws its own
/// solver noises (`branch.i`).
pub fn sde_rollouts(
    params: &ModelParams,
    prompt: &PromptSpec,
    cfg: &ArcopoConfig,
    stream: &RngStream,
) -> Result<SdeGroup> {
    cfg.validate()?;
    let (l, t, dim) = (cfg.chunks, cfg.sampler.steps(), params.dims.chunk_dim);
    let base = NoisePlan::generate(&stream.child("plan"), l, t, dim)?;
    let branches = (1..=cfg.copo.group_size)
        .into_par_iter()
        .map(|i| {
            let own = NoisePlan::generate(&stream.child(format!("branch.{i}")), l, t, dim)?;
            let plan = NoisePlan::from_parts(base.init_noises.clone(), own.solver_noises, own.provenance)?;
            let seq = rollout_sequence(params, prompt, &plan, &cfg.sampler, l)?;
            let r = eval_reward(&seq.chunks, prompt, &cfg.reward, l)?;
            Ok((seq, r))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut group = SdeGroup {
        trajectories: Vec::with_capacity(branches.len()),
        contexts: Vec::with_capacity(branches.len()),
        rewards: Vec::with_capacity(branches.len()),
        timesteps: cfg.sampler.timesteps.clone(),
    };
    for (seq, r) in branches {
        group.trajectories.push(seq.trajectories);
        group.contexts.push(seq.contexts);
        group.rewards.push(r);
    }
    Ok(group)
}

/// The SDE-GRPO baseline loop: frozen initial noise, exploration only through
/// the solver's re-noise draws.
pub fn train_sde<L: Learner + ?Sized>(
    learner: &mut L,
    prompts: &[PromptSpec],
    cfg: &ArcopoConfig,
    iters: usize,
    stream: &RngStream,
) -> Result<Vec<IterationRecord>> {
    cfg.validate()?;
    non_empty_prompts(prompts)?;
    if cfg.sampler.steps() < 2 {
        return Err(invalid("SDE baseline needs T >= 2"));
    }
    let mut opt = cfg.copo.optimizer(learner.trainable().len());
    let mut curve = Vec::with_capacity(iters);
    for n in 1..=iters {
        let started = Instant::now();
        let s = stream.child(format!("iter.{n}"));
        let prompt = &prompts[(n - 1) % prompts.len()];
        let group = sde_rollouts(&learner.effective()?, prompt, cfg, &s)?;
        let mut rec = IterationRecord::new(n, prompt.prompt_seed, 0, group.rewards.clone(), &cfg.copo)?;
        let stats = sde_grpo_update(learner, &mut opt, &group, &cfg.copo)
            .map_err(|e| numeric(format!("SDE iteration {n}: {e}")))?;
        rec.absorb(&stats);
        rec.wall_time_ms = started.elapsed().as_secs_f64() * 1e3;
        curve.push(rec);
    }
    Ok(curve)
}

/// Mean of `reward_mean` over records `range`.
pub fn window_mean(curve: &[IterationRecord], range: std::ops::Range<usize>) -> f64 {
    let xs: Vec<f64> = curve[range].iter().map(|r| r.reward_mean).collect();
    vecops::mean(&xs)
}

/// Least-squares slope of `reward_mean` against iteration index.
pub fn reward_slope(curve: &[IterationRecord]) -> f64 {
    let n = curve.len() as f64;
    let xm = (n - 1.0) / 2.0;
    let ym = curve.iter().map(|r| r.reward_mean).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, r) in curve.iter().enumerate() {
        let dx = i as f64 - xm;
        sxy += dx * (r.reward_mean - ym);
        sxx += dx * dx;
    }
    sxy / sxx
}

pub const CURVE_CSV_HEADER: &str = "iter,pivot,reward_mean,reward_std,objective,clip_frac";

/// Curve rows under [`CURVE_CSV_HEADER`].
pub fn curves_csv(curve: &[IterationRecord]) -> String {
    let mut out = String::from(CURVE_CSV_HEADER);
    out.push('\n');
    for r in curve {
        out.push_str(&format!(
            "{},{},{:e},{:e},{:e},{:e}\n",
            r.iter, r.pivot, r.reward_mean, r.reward_std, r.objective, r.clip_frac
        ));
    }
    out
}

/// Deterministic evaluation of a policy: fixed noise plans per prompt, so two
/// parameter sets are compared on identical draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSuite {
    pub train_prompts: Vec<PromptSpec>,
    pub held_out_prompts: Vec<PromptSpec>,
    pub samples_per_prompt: usize,
    pub seed: u64,
    pub chunks: usize,
    pub sampler: SamplerConfig,
    /// The optimized reward.
    pub reward: RewardSpec,
    /// Held-out monitors, summed with the held-out optimized reward.
    pub monitors: Vec<RewardSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Optimized reward on the training prompts.
    pub in_domain: f64,
    /// Optimized reward on unseen prompts.
    pub held_out_reward: f64,
    /// One entry per monitor, on unseen prompts.
    pub held_out_monitors: Vec<f64>,
    /// `held_out_reward + Σ monitors`.
    pub held_out: f64,
}

impl EvalSuite {
    fn mean_reward(&self, params: &ModelParams, prompts: &[PromptSpec], specs: &[&RewardSpec]) -> Result<Vec<f64>> {
        let seqs = prompts
            .par_iter()
            .map(|p| {
                (1..=self.samples_per_prompt)
                    .map(|j| {
                        let s = RngStream::at(self.seed, &format!("eval/prompt.{}/sample.{j}", p.prompt_seed));
                        let plan = NoisePlan::generate(&s, self.chunks, self.sampler.steps(), params.dims.chunk_dim)?;
                        let seq = rollout_sequence(params, p, &plan, &self.sampler, self.chunks)?;
                        specs
                            .iter()
                            .map(|spec| eval_reward(&seq.chunks, p, spec, self.chunks))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let n = (prompts.len() * self.samples_per_prompt) as f64;
        let mut out = vec![0.0; specs.len()];
        for per_prompt in &seqs {
            for per_sample in per_prompt {
                for (o, r) in out.iter_mut().zip(per_sample) {
                    *o += r;
                }
            }
        }
        Ok(out.into_iter().map(|x| x / n).collect())
    }

    pub fn evaluate(&self, params: &ModelParams) -> Result<EvalReport> {
        if self.samples_per_prompt == 0 || self.train_prompts.is_empty() || self.held_out_prompts.is_empty() {
            return Err(invalid("evaluation needs prompts and at least one sample per prompt"));
        }
        let in_domain = self.mean_reward(params, &self.train_prompts, &[&self.reward])?[0];
        let mut specs = vec![&self.reward];
        specs.extend(self.monitors.iter());
        let held = self.mean_reward(params, &self.held_out_prompts, &specs)?;
        Ok(EvalReport {
            in_domain,
            held_out_reward: held[0],
            held_out_monitors: held[1..].to_vec(),
            held_out: held.iter().sum(),
        })
    }
}
