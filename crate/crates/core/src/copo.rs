//! Contrastive policy optimization over a forked pivot chunk.
//!
//! The "policy" being optimized is a surrogate: a softmax over negative
//! distances between an anchor (re-evaluated under the current parameters)
//! and the G stored candidates. Ratios against the same construction under
//! the old parameters feed a clipped group-relative objective.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, numeric, Result};
use crate::numerics::{grad, vecops, RngStream, Tape, Var};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rollout::ReplayEntry;
use crate::toygen::{ChunkTrajectory, ContextCache, ModelDims, ModelParams, SamplerKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardGroup {
    pub rewards: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl RewardGroup {
    pub fn new(rewards: Vec<f64>) -> Result<Self> {
        if rewards.len() < 2 {
            return Err(invalid(format!(
                "a reward group needs at least 2 members, got {}",
                rewards.len()
            )));
        }
        if !vecops::all_finite(&rewards) {
            return Err(invalid("non-finite reward"));
        }
        let mean = vecops::mean(&rewards);
        let std = vecops::pop_std(&rewards);
        Ok(Self { rewards, mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageVec {
    pub values: Vec<f64>,
    /// Set when the group's spread fell below the threshold and every
    /// advantage was zeroed.
    pub degenerate: bool,
}

impl AdvantageVec {
    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|a| *a == 0.0)
    }
}

/// `A_i = (r_i - mean) / std`, or all zeros when `std < threshold`.
pub fn group_advantages(rewards: &[f64], threshold: f64) -> Result<AdvantageVec> {
    let g = RewardGroup::new(rewards.to_vec())?;
    if g.std < threshold {
        return Ok(AdvantageVec {
            values: vec![0.0; rewards.len()],
            degenerate: true,
        });
    }
    Ok(AdvantageVec {
        values: g.rewards.iter().map(|r| (r - g.mean) / g.std).collect(),
        degenerate: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateSpace {
    /// Intermediate latents `x_t` (flow sampler).
    Latent,
    /// Clean predictions `x0_hat` (consistency sampler).
    Prediction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogatePolicy {
    pub probs: Vec<f64>,
    pub distances: Vec<f64>,
    pub tau: f64,
    pub space: SurrogateSpace,
}

fn surrogate(candidates: &[Vec<f64>], anchor: &[f64], tau: f64, space: SurrogateSpace) -> Result<SurrogatePolicy> {
    if candidates.is_empty() {
        return Err(invalid("surrogate policy over an empty candidate set"));
    }
    if candidates.iter().any(|c| c.len() != anchor.len()) {
        return Err(invalid("candidate and anchor dimensions differ"));
    }
    let distances: Vec<f64> = candidates.iter().map(|c| vecops::sq_dist(c, anchor)).collect();
    let probs = vecops::softmax_neg_scaled(&distances, tau)?;
    Ok(SurrogatePolicy {
        probs,
        distances,
        tau,
        space,
    })
}

/// Distances between an anchor latent and candidate latents at one timestep.
pub fn surrogate_fm(candidates: &[Vec<f64>], anchor: &[f64], tau: f64) -> Result<SurrogatePolicy> {
    surrogate(candidates, anchor, tau, SurrogateSpace::Latent)
}

/// Distances between old-parameter candidate predictions and the current
/// prediction on the anchor's input.
pub fn surrogate_cm(candidate_x0_old: &[Vec<f64>], anchor_x0_current: &[f64], tau0: f64) -> Result<SurrogatePolicy> {
    surrogate(candidate_x0_old, anchor_x0_current, tau0, SurrogateSpace::Prediction)
}

/// One summand of the clipped objective, `min(ρA, clip(ρ, 1-ε, 1+ε)A)`.
pub fn clipped_term(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    if unclipped <= clipped {
        unclipped
    } else {
        clipped
    }
}

/// Whether the clip removes the gradient of this term.
pub fn is_clipped(ratio: f64, advantage: f64, clip_eps: f64) -> bool {
    (advantage > 0.0 && ratio > 1.0 + clip_eps) || (advantage < 0.0 && ratio < 1.0 - clip_eps)
}

fn check_pair(pi_new: &[f64], pi_old: &[f64], adv: &[f64]) -> Result<()> {
    if pi_new.len() != pi_old.len() || pi_new.len() != adv.len() || pi_new.is_empty() {
        return Err(invalid("policy and advantage lengths differ"));
    }
    if pi_old.contains(&0.0) {
        return Err(numeric("old-policy probability is zero; ratio undefined"));
    }
    Ok(())
}

/// `(1/G) Σ min(ρ_i A_i, clip(ρ_i) A_i)` with `ρ_i = π_new(i) / π_old(i)`.
pub fn clipped_objective(pi_new: &[f64], pi_old: &[f64], adv: &[f64], clip_eps: f64) -> Result<f64> {
    check_pair(pi_new, pi_old, adv)?;
    let total: f64 = pi_new
        .iter()
        .zip(pi_old)
        .zip(adv)
        .map(|((n, o), a)| clipped_term(n / o, *a, clip_eps))
        .sum();
    Ok(total / pi_new.len() as f64)
}

/// Recorded objective. `clip_eps = None` drops the clip and keeps the raw
/// ratio-weighted term. Returns the objective node and the ratio node.
pub fn clipped_objective_tape(
    tape: &mut Tape,
    pi_new: Var,
    pi_old: &[f64],
    adv: &[f64],
    clip_eps: Option<f64>,
) -> Result<(Var, Var)> {
    check_pair(tape.value(pi_new), pi_old, adv)?;
    let old = tape.constant(pi_old);
    let ratio = tape.div(pi_new, old)?;
    Ok((clipped_mean_tape(tape, ratio, adv, clip_eps)?, ratio))
}

fn clipped_mean_tape(tape: &mut Tape, ratio: Var, adv: &[f64], clip_eps: Option<f64>) -> Result<Var> {
    let a = tape.constant(adv);
    let unclipped = tape.mul(ratio, a)?;
    let terms = match clip_eps {
        Some(eps) => {
            let c = tape.clamp(ratio, 1.0 - eps, 1.0 + eps);
            let clipped = tape.mul(c, a)?;
            tape.min(unclipped, clipped)?
        }
        None => unclipped,
    };
    Ok(tape.mean(terms))
}

/// Surrogate ratios `π_new(i)/π_old(i)` computed from distances without
/// forming either probability: with `w_i = exp(-(d_new_i - d_old_i)/τ)`,
/// `ρ_i = w_i / Σ_j π_old(j)·w_j`. Stays finite when `π_old` underflows.
pub fn surrogate_ratio_tape(tape: &mut Tape, d_new: Var, d_old: &[f64], tau: f64) -> Result<Var> {
    if tape.value(d_new).len() != d_old.len() || d_old.is_empty() {
        return Err(invalid("distance vectors differ in length"));
    }
    let pi_old = vecops::softmax_neg_scaled(d_old, tau)?;
    let old = tape.constant(d_old);
    let delta = tape.sub(d_new, old)?;
    let dmin = tape.value(delta).iter().copied().fold(f64::INFINITY, f64::min);
    let shifted = tape.offset(delta, -dmin);
    let logits = tape.scale(shifted, -1.0 / tau);
    let w = tape.exp(logits);
    let po = tape.constant(&pi_old);
    let weighted = tape.mul(w, po)?;
    let z = tape.sum(weighted);
    tape.div(w, z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CopoConfig {
    pub clip_eps: f64,
    /// Latent-space temperature; `None` uses each group's mean pairwise
    /// old-policy distance.
    pub tau: Option<f64>,
    /// Prediction-space temperature, same auto rule.
    pub tau0: Option<f64>,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub group_size: usize,
    pub sigma: f64,
    pub anchor_batch: usize,
    pub update_steps: usize,
    pub degenerate_std_threshold: f64,
    /// 1-based sampler step whose latent the flow surrogate compares. Step 1
    /// is the noise itself and carries no parameter dependence.
    pub fm_step: usize,
}

impl Default for CopoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 1e-4,
            tau: None,
            tau0: None,
            learning_rate: 1e-5,
            optimizer: OptimizerKind::Sgd,
            group_size: 12,
            sigma: 0.5,
            anchor_batch: 4,
            update_steps: 2,
            degenerate_std_threshold: 1e-8,
            fm_step: 2,
        }
    }
}

impl CopoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0) {
            return Err(invalid(format!("clip_eps must be positive, got {}", self.clip_eps)));
        }
        for t in [self.tau, self.tau0].into_iter().flatten() {
            if !(t > 0.0) || !t.is_finite() {
                return Err(invalid(format!("temperature must be positive, got {t}")));
            }
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid("learning rate must be finite and non-negative"));
        }
        if self.group_size < 2 {
            return Err(invalid("group_size must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(invalid(format!("sigma must lie in [0, 1], got {}", self.sigma)));
        }
        if self.anchor_batch == 0 || self.anchor_batch > self.group_size {
            return Err(invalid(format!(
                "anchor_batch must lie in 1..={}, got {}",
                self.group_size, self.anchor_batch
            )));
        }
        if self.fm_step < 2 {
            return Err(invalid("fm_step must be at least 2"));
        }
        Ok(())
    }

    pub fn optimizer(&self, n: usize) -> Optimizer {
        Optimizer::new(self.optimizer, self.learning_rate, n)
    }
}

/// Something whose trainable coordinates determine a full parameter vector.
pub trait Learner {
    fn effective(&self) -> Result<ModelParams>;
    fn trainable(&self) -> &[f64];
    fn trainable_mut(&mut self) -> &mut [f64];
    /// Map a gradient over the effective parameters to one over the
    /// trainable coordinates.
    fn pullback(&self, effective_grad: &[f64]) -> Result<Vec<f64>>;
}

impl Learner for ModelParams {
    fn effective(&self) -> Result<ModelParams> {
        Ok(self.clone())
    }

    fn trainable(&self) -> &[f64] {
        &self.values
    }

    fn trainable_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn pullback(&self, effective_grad: &[f64]) -> Result<Vec<f64>> {
        Ok(effective_grad.to_vec())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub objective: f64,
    pub ratio_mean: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    /// Fraction of terms whose gradient the clip removes (counted the same
    /// way when the clip is disabled).
    pub clip_frac: f64,
}

impl StepStats {
    /// `term_adv[i]` is the advantage multiplying `ratios[i]`.
    fn from_terms(objective: f64, ratios: &[f64], term_adv: &[f64], clip_eps: f64) -> Self {
        let n = ratios.len() as f64;
        let clipped = ratios
            .iter()
            .zip(term_adv)
            .filter(|(r, a)| is_clipped(**r, **a, clip_eps))
            .count();
        Self {
            objective,
            ratio_mean: ratios.iter().sum::<f64>() / n,
            ratio_min: ratios.iter().copied().fold(f64::INFINITY, f64::min),
            ratio_max: ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            clip_frac: clipped as f64 / n,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub objective: f64,
    pub ratio_mean: f64,
    pub ratio_max: f64,
    pub clip_frac: f64,
    pub tau: f64,
    /// True when the advantages were all zero and no step was taken.
    pub skipped: bool,
    pub per_step: Vec<StepStats>,
}

impl UpdateStats {
    fn summarize(tau: f64, per_step: Vec<StepStats>) -> Self {
        let n = per_step.len().max(1) as f64;
        Self {
            objective: per_step.iter().map(|s| s.objective).sum::<f64>() / n,
            ratio_mean: per_step.iter().map(|s| s.ratio_mean).sum::<f64>() / n,
            ratio_max: per_step.iter().map(|s| s.ratio_max).fold(f64::NEG_INFINITY, f64::max),
            clip_frac: per_step.iter().map(|s| s.clip_frac).sum::<f64>() / n,
            tau,
            skipped: false,
            per_step,
        }
    }

    fn skipped(tau: f64) -> Self {
        Self {
            tau,
            skipped: true,
            ..Self::default()
        }
    }
}

/// Pick `count` distinct candidate indices to serve as anchors.
pub fn select_anchors(group_size: usize, count: usize, stream: &RngStream) -> Result<Vec<usize>> {
    stream.clone().sample_without_replacement(group_size, count)
}

fn check_entry(entry: &ReplayEntry, dims: &ModelDims) -> Result<()> {
    let g = entry.candidates.len();
    if g < 2 || entry.rewards.len() != g {
        return Err(invalid(format!(
            "replay entry has {g} candidates and {} rewards",
            entry.rewards.len()
        )));
    }
    let t = entry.sampler.steps();
    for c in &entry.candidates {
        if c.steps.len() != t {
            return Err(invalid("candidate trajectory length does not match the sampler"));
        }
        if c.steps
            .iter()
            .any(|s| s.x_t.len() != dims.chunk_dim || s.x0_pred.len() != dims.chunk_dim)
        {
            return Err(invalid("candidate chunk dimension does not match the model"));
        }
    }
    if entry.context.h.len() != dims.context_dim {
        return Err(invalid("entry context dimension does not match the model"));
    }
    Ok(())
}

fn column<'a>(
    cands: &'a [ChunkTrajectory],
    k: usize,
    f: impl Fn(&'a crate::toygen::StepRecord) -> &'a Vec<f64>,
) -> Vec<Vec<f64>> {
    cands.iter().map(|c| f(&c.steps[k]).clone()).collect()
}

/// Mean pairwise distance between old-policy candidates in the surrogate's
/// space, used when no temperature is configured.
pub fn auto_temperature(entry: &ReplayEntry, cfg: &CopoConfig) -> Result<f64> {
    let cands = &entry.candidates;
    let ks: Vec<usize> = match entry.sampler.kind {
        SamplerKind::Consistency => (0..entry.sampler.steps()).collect(),
        SamplerKind::FlowOde => vec![fm_index(entry, cfg.fm_step)?],
    };
    let mut total = 0.0;
    let mut n = 0usize;
    for k in ks {
        let pts = match entry.sampler.kind {
            SamplerKind::Consistency => column(cands, k, |s| &s.x0_pred),
            SamplerKind::FlowOde => column(cands, k, |s| &s.x_t),
        };
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                total += vecops::sq_dist(&pts[i], &pts[j]);
                n += 1;
            }
        }
    }
    let tau = total / n as f64;
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(numeric(format!(
            "cannot derive a temperature from a collapsed group ({tau})"
        )));
    }
    Ok(tau)
}

/// Configured temperature for the entry's sampler kind, or the auto value.
pub fn resolve_temperature(entry: &ReplayEntry, cfg: &CopoConfig) -> Result<f64> {
    let configured = match entry.sampler.kind {
        SamplerKind::Consistency => cfg.tau0,
        SamplerKind::FlowOde => cfg.tau,
    };
    configured.map_or_else(|| auto_temperature(entry, cfg), Ok)
}

fn fm_index(entry: &ReplayEntry, fm_step: usize) -> Result<usize> {
    let t = entry.sampler.steps();
    if fm_step < 2 || fm_step > t {
        return Err(invalid(format!("fm_step {fm_step} outside 2..={t} for this sampler")));
    }
    Ok(fm_step - 1)
}

/// Everything the pivot-chunk objective needs besides parameters and data.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveSpec<'a> {
    pub adv: &'a [f64],
    pub anchors: &'a [usize],
    pub tau: f64,
    /// `None` drops the clip.
    pub clip_eps: Option<f64>,
    pub fm_step: usize,
}

/// Recorded pivot-chunk objective for the parameter node `p`. Returns the
/// objective node and the ratio nodes, one per (anchor, step).
pub fn pivot_objective_tape(
    tape: &mut Tape,
    p: Var,
    dims: &ModelDims,
    entry: &ReplayEntry,
    spec: &ObjectiveSpec,
) -> Result<(Var, Vec<Var>)> {
    let ObjectiveSpec {
        adv,
        anchors,
        tau,
        clip_eps,
        fm_step,
    } = *spec;
    let cands = &entry.candidates;
    let h = tape.constant(&entry.context.h);
    let mut objectives = Vec::new();
    let mut ratios = Vec::new();
    let mut term = |tape: &mut Tape, anchor_cur: Var, old_points: &[Vec<f64>], anchor_old: &[f64]| -> Result<()> {
        let d_old: Vec<f64> = old_points.iter().map(|c| vecops::sq_dist(c, anchor_old)).collect();
        let ds = old_points
            .iter()
            .map(|c| {
                let cv = tape.constant(c);
                tape.sq_dist(cv, anchor_cur)
            })
            .collect::<Result<Vec<_>>>()?;
        let d = tape.concat(&ds);
        let r = surrogate_ratio_tape(tape, d, &d_old, tau)?;
        let j = clipped_mean_tape(tape, r, adv, clip_eps)?;
        objectives.push(j);
        ratios.push(r);
        Ok(())
    };
    match entry.sampler.kind {
        SamplerKind::Consistency => {
            for &a in anchors {
                for (k, st) in cands[a].steps.iter().enumerate() {
                    let x = tape.constant(&st.x_t);
                    let pred = ModelParams::predict_x0_tape(dims, tape, p, x, h, st.t)?;
                    let old = column(cands, k, |s| &s.x0_pred);
                    term(tape, pred, &old, &st.x0_pred)?;
                }
            }
        }
        SamplerKind::FlowOde => {
            let m = fm_index(entry, fm_step)?;
            let ts = &entry.sampler.timesteps;
            for &a in anchors {
                let mut x = tape.constant(&cands[a].steps[0].x_t);
                for k in 0..m {
                    let pred = ModelParams::predict_x0_tape(dims, tape, p, x, h, ts[k])?;
                    let diff = tape.sub(x, pred)?;
                    let v = tape.scale(diff, (ts[k + 1] - ts[k]) / ts[k]);
                    x = tape.add(x, v)?;
                }
                let old = column(cands, m, |s| &s.x_t);
                term(tape, x, &old, &cands[a].steps[m].x_t)?;
            }
        }
    }
    let all = tape.concat(&objectives);
    Ok((tape.mean(all), ratios))
}

/// Objective value and gradient with respect to the effective parameters.
/// The third component lists every ratio, in (anchor, step, candidate) order.
pub fn pivot_objective_grad(
    params: &ModelParams,
    entry: &ReplayEntry,
    spec: &ObjectiveSpec,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_entry(entry, &params.dims)?;
    let dims = params.dims;
    let mut ratio_values = Vec::new();
    let (j, g) = grad(&params.values, |tape, p| {
        let (obj, ratios) = pivot_objective_tape(tape, p, &dims, entry, spec)?;
        for r in ratios {
            ratio_values.extend_from_slice(tape.value(r));
        }
        Ok(obj)
    })?;
    Ok((j, g, ratio_values))
}

/// `cfg.update_steps` ascent steps on the pivot-chunk objective of `entry`.
///
/// The old policy is whatever produced the entry's stored predictions. All
/// anchors are fixed for the whole update. With `clip = false` the objective
/// is the raw ratio-weighted advantage.
pub fn copo_update<L: Learner + ?Sized>(
    learner: &mut L,
    opt: &mut Optimizer,
    entry: &ReplayEntry,
    cfg: &CopoConfig,
    tau: f64,
    clip: bool,
    anchors: &[usize],
) -> Result<UpdateStats> {
    let eff = learner.effective()?;
    check_entry(entry, &eff.dims)?;
    if anchors.is_empty() || anchors.iter().any(|&a| a >= entry.candidates.len()) {
        return Err(invalid(format!("anchor indices {anchors:?} out of range")));
    }
    let adv = group_advantages(&entry.rewards, cfg.degenerate_std_threshold)?;
    if adv.is_zero() {
        return Ok(UpdateStats::skipped(tau));
    }
    let spec = ObjectiveSpec {
        adv: &adv.values,
        anchors,
        tau,
        clip_eps: clip.then_some(cfg.clip_eps),
        fm_step: cfg.fm_step,
    };
    let mut per_step = Vec::with_capacity(cfg.update_steps);
    for step in 0..cfg.update_steps {
        let eff = if step == 0 { eff.clone() } else { learner.effective()? };
        let (j, g, ratios) = pivot_objective_grad(&eff, entry, &spec)?;
        let term_adv: Vec<f64> = adv.values.iter().copied().cycle().take(ratios.len()).collect();
        per_step.push(StepStats::from_terms(j, &ratios, &term_adv, cfg.clip_eps));
        let dir = learner.pullback(&g)?;
        opt.ascend(learner.trainable_mut(), &dir);
        if !vecops::all_finite(learner.trainable()) {
            return Err(numeric(format!("parameters became non-finite at update step {step}")));
        }
    }
    Ok(UpdateStats::summarize(tau, per_step))
}

/// Convenience form on full parameters: a fresh optimizer, anchors drawn from
/// `stream`, temperature from `cfg` or the entry.
pub fn copo_update_params(
    params: &ModelParams,
    entry: &ReplayEntry,
    cfg: &CopoConfig,
    stream: &RngStream,
) -> Result<(ModelParams, UpdateStats)> {
    cfg.validate()?;
    let mut out = params.clone();
    let mut opt = cfg.optimizer(out.values.len());
    let tau = resolve_temperature(entry, cfg)?;
    let anchors = select_anchors(entry.candidates.len(), cfg.anchor_batch, stream)?;
    let stats = copo_update(&mut out, &mut opt, entry, cfg, tau, true, &anchors)?;
    Ok((out, stats))
}

/// G full rollouts that share every initial noise but draw their own solver
/// noises; the policy is the Gaussian re-noise transition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdeGroup {
    /// `trajectories[i][q]`: branch `i`, chunk `q`.
    pub trajectories: Vec<Vec<ChunkTrajectory>>,
    pub contexts: Vec<Vec<ContextCache>>,
    pub rewards: Vec<f64>,
    pub timesteps: Vec<f64>,
}

fn check_sde(group: &SdeGroup, dims: &ModelDims) -> Result<()> {
    if group.timesteps.len() < 2 {
        return Err(invalid(
            "SDE baseline needs T >= 2: with one step there is no injected noise to act on",
        ));
    }
    let g = group.trajectories.len();
    if g < 2 || group.rewards.len() != g || group.contexts.len() != g {
        return Err(invalid("malformed SDE group"));
    }
    for (trs, ctxs) in group.trajectories.iter().zip(&group.contexts) {
        if trs.len() != ctxs.len() || ctxs.iter().any(|c| c.h.len() != dims.context_dim) {
            return Err(invalid("SDE group context/trajectory mismatch"));
        }
        if trs.iter().any(|t| t.steps.len() != group.timesteps.len()) {
            return Err(invalid("SDE trajectory length does not match the schedule"));
        }
    }
    Ok(())
}

/// `log N(x_next; mean, t² I)` up to the shared constant.
fn gauss_logp(x_next: &[f64], mean: &[f64], t: f64) -> f64 {
    -vecops::sq_dist(x_next, mean) / (2.0 * t * t)
}

/// Objective, gradient, ratios and the advantage paired with each ratio.
#[allow(clippy::type_complexity)]
fn sde_objective_grad(
    params: &ModelParams,
    group: &SdeGroup,
    adv: &[f64],
    clip_eps: Option<f64>,
) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let dims = params.dims;
    let ts = &group.timesteps;
    let mut ratio_values = Vec::new();
    let mut term_adv = Vec::new();
    let (j, g) = grad(&params.values, |tape, p| {
        let mut terms = Vec::new();
        for (i, (trs, ctxs)) in group.trajectories.iter().zip(&group.contexts).enumerate() {
            for (tr, ctx) in trs.iter().zip(ctxs) {
                let h = tape.constant(&ctx.h);
                for k in 0..ts.len() - 1 {
                    let st = &tr.steps[k];
                    let next = &tr.steps[k + 1].x_t;
                    let x = tape.constant(&st.x_t);
                    let mean = ModelParams::predict_x0_tape(&dims, tape, p, x, h, st.t)?;
                    let nv = tape.constant(next);
                    let d = tape.sq_dist(nv, mean)?;
                    let logp = tape.scale(d, -1.0 / (2.0 * ts[k + 1] * ts[k + 1]));
                    let old = gauss_logp(next, &st.x0_pred, ts[k + 1]);
                    let lr = tape.offset(logp, -old);
                    let ratio = tape.exp(lr);
                    ratio_values.push(tape.scalar(ratio));
                    term_adv.push(adv[i]);
                    let a = tape.constant(&[adv[i]]);
                    let un = tape.mul(ratio, a)?;
                    let t = match clip_eps {
                        Some(eps) => {
                            let c = tape.clamp(ratio, 1.0 - eps, 1.0 + eps);
                            let cl = tape.mul(c, a)?;
                            tape.min(un, cl)?
                        }
                        None => un,
                    };
                    terms.push(t);
                }
            }
        }
        let all = tape.concat(&terms);
        Ok(tape.mean(all))
    })?;
    Ok((j, g, ratio_values, term_adv))
}

/// Clipped GRPO over the solver-noise transitions of an SDE group.
pub fn sde_grpo_update<L: Learner + ?Sized>(
    learner: &mut L,
    opt: &mut Optimizer,
    group: &SdeGroup,
    cfg: &CopoConfig,
) -> Result<UpdateStats> {
    let eff = learner.effective()?;
    check_sde(group, &eff.dims)?;
    let adv = group_advantages(&group.rewards, cfg.degenerate_std_threshold)?;
    if adv.is_zero() {
        return Ok(UpdateStats::skipped(0.0));
    }
    let mut per_step = Vec::with_capacity(cfg.update_steps);
    for step in 0..cfg.update_steps {
        let eff = if step == 0 { eff.clone() } else { learner.effective()? };
        let (j, g, ratios, term_adv) = sde_objective_grad(&eff, group, &adv.values, Some(cfg.clip_eps))?;
        per_step.push(StepStats::from_terms(j, &ratios, &term_adv, cfg.clip_eps));
        let dir = learner.pullback(&g)?;
        opt.ascend(learner.trainable_mut(), &dir);
        if !vecops::all_finite(learner.trainable()) {
            return Err(numeric(format!("parameters became non-finite at update step {step}")));
        }
    }
    Ok(UpdateStats::summarize(0.0, per_step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn advantage_hand_cases() {
        let a = group_advantages(&[0.0, 1.0], 1e-8).unwrap();
        assert_eq!(a.values, vec![-1.0, 1.0]);
        let b = group_advantages(&[2.0, 4.0, 6.0], 1e-8).unwrap();
        let s = (8.0f64 / 3.0).sqrt();
        assert!((b.values[0] + 2.0 / s).abs() < 1e-12);
        assert_eq!(b.values[1], 0.0);
        assert!((b.values[2] - 1.224744871391589).abs() < 1e-12);
        let c = group_advantages(&[3.5; 5], 1e-8).unwrap();
        assert!(c.degenerate && c.is_zero());
        assert!(group_advantages(&[1.0], 1e-8).is_err());
    }

    #[test]
    fn clip_hand_cases() {
        assert!((clipped_term(1.5, 1.0, 1e-4) - 1.0001).abs() < 1e-12);
        assert!((clipped_term(0.5, -1.0, 1e-4) + 0.9999).abs() < 1e-12);
        assert_eq!(clipped_term(1.0, 0.7, 1e-4), 0.7);
    }

    #[test]
    fn unit_ratios_give_mean_advantage() {
        let adv = group_advantages(&[0.1, 0.5, -0.2, 0.9], 1e-8).unwrap().values;
        let pi = vec![0.1, 0.2, 0.3, 0.4];
        let j = clipped_objective(&pi, &pi, &adv, 1e-4).unwrap();
        assert!(j.abs() < 1e-15);
        assert!(clipped_objective(&pi, &[0.5, 0.5, 0.0, 0.0], &adv, 1e-4).is_err());
    }

    #[test]
    fn surrogate_hand_case() {
        let tau = 0.3;
        let anchor = vec![0.0, 0.0];
        let r = (tau * 2f64.ln()).sqrt();
        let cands = vec![vec![0.0, 0.0], vec![r, 0.0], vec![0.0, -r]];
        let s = surrogate_fm(&cands, &anchor, tau).unwrap();
        for (p, e) in s.probs.iter().zip([0.5, 0.25, 0.25]) {
            assert!((p - e).abs() < 1e-12);
        }
        assert!(surrogate_cm(&[vec![1.0], vec![1.0, 2.0]], &[0.0], 1.0).is_err());
    }

    #[test]
    fn tape_objective_matches_plain() {
        let pi_old = [0.2, 0.3, 0.5];
        let adv = [1.0, -0.5, -0.5];
        for pi_new in [[0.3, 0.3, 0.4], [0.2, 0.3, 0.5], [0.1, 0.2, 0.7]] {
            let mut tape = Tape::new();
            let p = tape.param(&pi_new);
            let (j, _) = clipped_objective_tape(&mut tape, p, &pi_old, &adv, Some(0.1)).unwrap();
            let plain = clipped_objective(&pi_new, &pi_old, &adv, 0.1).unwrap();
            assert!((tape.scalar(j) - plain).abs() < 1e-15);
        }
    }

    #[test]
    fn clipped_terms_have_zero_gradient() {
        let pi_old = [0.25, 0.25, 0.25, 0.25];
        let pi_new = [0.4, 0.1, 0.26, 0.24];
        let adv = [1.0, -1.0, -1.0, 1.0];
        let eps = 0.01;
        let mut tape = Tape::new();
        let p = tape.param(&pi_new);
        let (j, _) = clipped_objective_tape(&mut tape, p, &pi_old, &adv, Some(eps)).unwrap();
        let g = tape.backward(j).unwrap().remove(0);
        // terms 0 and 1 are outside the trust region on the clipped side
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.0);
        assert!(g[2] != 0.0 && g[3] != 0.0);
    }

    proptest! {
        #[test]
        fn advantages_normalized(r in proptest::collection::vec(-10.0f64..10.0, 2..20)) {
            let a = group_advantages(&r, 1e-8).unwrap();
            if !a.degenerate {
                prop_assert!(vecops::mean(&a.values).abs() < 1e-10);
                prop_assert!((vecops::pop_std(&a.values) - 1.0).abs() < 1e-10);
            }
        }

        #[test]
        fn shift_invariance_exact_on_dyadic_rewards(
            k in (1u32..5).prop_flat_map(|e| proptest::collection::vec(-64i32..64, 1usize << e)),
            c in -1000i32..1000,
        ) {
            // power-of-two groups of dyadic rewards keep every intermediate exact
            let r: Vec<f64> = k.iter().map(|x| *x as f64 / 8.0).collect();
            let s: Vec<f64> = r.iter().map(|x| x + c as f64).collect();
            prop_assert_eq!(group_advantages(&r, 1e-8).unwrap(), group_advantages(&s, 1e-8).unwrap());
        }

        #[test]
        fn temperature_scaling_leaves_probs(
            d in proptest::collection::vec(0.0f64..5.0, 2..10),
            e in -6i32..6,
        ) {
            let f = 2f64.powi(e);
            let a = surrogate_cm(&d.iter().map(|x| vec![x.sqrt()]).collect::<Vec<_>>(), &[0.0], 0.7).unwrap();
            let scaled: Vec<f64> = a.distances.iter().map(|x| x * f).collect();
            prop_assert_eq!(a.probs, vecops::softmax_neg_scaled(&scaled, 0.7 * f).unwrap());
        }
    }
}
