//! Noise plans, neighbor perturbation, branch forking, and the
//! noise-substitution study.
//!
//! Chunk and step indices in this module are 1-based, matching the labels the
//! draws are keyed by (`init.q`, `solver.q.k`, `delta.i`).

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{vecops, RngStream};
use crate::rewards::PromptSpec;
use crate::toygen::{rollout_sequence, ModelParams, SamplerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub root_seed: u64,
    pub label: String,
}

/// Every random draw of one rollout: per-chunk initial noises and the
/// consistency solver's re-noise draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePlan {
    pub init_noises: Vec<Vec<f64>>,
    /// `solver_noises[q][k]`: re-noise draw after step `k` of chunk `q` (0-based).
    pub solver_noises: Vec<Vec<Vec<f64>>>,
    steps: usize,
    chunk_dim: usize,
    pub provenance: Provenance,
}

impl NoisePlan {
    /// Draw `chunks` initial noises and `chunks x (steps-1)` solver noises from
    /// labelled children of `stream`.
    pub fn generate(stream: &RngStream, chunks: usize, steps: usize, chunk_dim: usize) -> Result<Self> {
        if chunks == 0 || steps == 0 || chunk_dim == 0 {
            return Err(invalid(format!(
                "noise plan needs positive sizes, got L={chunks} T={steps} dim={chunk_dim}"
            )));
        }
        let init_noises = (1..=chunks)
            .map(|q| stream.child(format!("init.{q}")).gaussian(chunk_dim))
            .collect::<Result<Vec<_>>>()?;
        let solver_noises = (1..=chunks)
            .map(|q| {
                (1..steps)
                    .map(|k| stream.child(format!("solver.{q}.{k}")).gaussian(chunk_dim))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            init_noises,
            solver_noises,
            steps,
            chunk_dim,
            provenance: Provenance {
                root_seed: stream.root_seed(),
                label: stream.path(),
            },
        })
    }

    /// Rebuild from stored blocks (used when loading persisted data).
    pub fn from_parts(
        init_noises: Vec<Vec<f64>>,
        solver_noises: Vec<Vec<Vec<f64>>>,
        provenance: Provenance,
    ) -> Result<Self> {
        let chunks = init_noises.len();
        let chunk_dim = init_noises.first().map_or(0, Vec::len);
        let steps = solver_noises.first().map_or(0, |s| s.len() + 1);
        if chunks == 0 || chunk_dim == 0 || solver_noises.len() != chunks {
            return Err(invalid("malformed noise plan"));
        }
        let ok = init_noises.iter().all(|v| v.len() == chunk_dim)
            && solver_noises
                .iter()
                .all(|s| s.len() + 1 == steps && s.iter().all(|v| v.len() == chunk_dim));
        if !ok {
            return Err(invalid("ragged noise plan"));
        }
        Ok(Self {
            init_noises,
            solver_noises,
            steps,
            chunk_dim,
            provenance,
        })
    }

    pub fn chunks(&self) -> usize {
        self.init_noises.len()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn chunk_dim(&self) -> usize {
        self.chunk_dim
    }

    /// Copy of the plan with the noise at `site` replaced.
    pub fn substitute(&self, site: Site, noise: Vec<f64>) -> Result<Self> {
        site.check(self)?;
        if noise.len() != self.chunk_dim {
            return Err(invalid("substitute noise has the wrong length"));
        }
        let mut out = self.clone();
        match site {
            Site::Init { chunk } => out.init_noises[chunk - 1] = noise,
            Site::Solver { chunk, step } => out.solver_noises[chunk - 1][step - 1] = noise,
        }
        Ok(out)
    }
}

/// `members[i] = sqrt(1 - σ²)·base + σ·deltas[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseNeighborhood {
    pub base: Vec<f64>,
    pub sigma: f64,
    pub members: Vec<Vec<f64>>,
    pub deltas: Vec<Vec<f64>>,
}

impl NoiseNeighborhood {
    pub fn group_size(&self) -> usize {
        self.members.len()
    }

    /// Build from explicit perturbations.
    pub fn from_deltas(base: &[f64], sigma: f64, deltas: Vec<Vec<f64>>) -> Result<Self> {
        if !(0.0..=1.0).contains(&sigma) {
            return Err(invalid(format!("sigma must lie in [0, 1], got {sigma}")));
        }
        if deltas.len() < 2 {
            return Err(invalid(format!(
                "a group needs at least 2 members, got {}",
                deltas.len()
            )));
        }
        if deltas.iter().any(|d| d.len() != base.len()) {
            return Err(invalid("perturbation length mismatch"));
        }
        let keep = (1.0 - sigma * sigma).sqrt();
        let members = deltas
            .iter()
            .map(|d| base.iter().zip(d).map(|(b, z)| keep * b + sigma * z).collect())
            .collect();
        Ok(Self {
            base: base.to_vec(),
            sigma,
            members,
            deltas,
        })
    }
}

/// Draw `group_size` fresh perturbations from `stream` (`delta.i`) and mix
/// them into `base`.
pub fn perturb(base: &[f64], sigma: f64, group_size: usize, stream: &RngStream) -> Result<NoiseNeighborhood> {
    if group_size < 2 {
        return Err(invalid(format!("a group needs at least 2 members, got {group_size}")));
    }
    if base.is_empty() {
        return Err(invalid("empty base noise"));
    }
    let deltas = (1..=group_size)
        .map(|i| stream.child(format!("delta.{i}")).gaussian(base.len()))
        .collect::<Result<Vec<_>>>()?;
    NoiseNeighborhood::from_deltas(base, sigma, deltas)
}

/// G plans that agree everywhere except the pivot chunk's initial noise.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchPlans {
    /// 1-based pivot chunk.
    pub pivot: usize,
    pub plans: Vec<NoisePlan>,
}

pub fn fork(plan: &NoisePlan, pivot: usize, hood: &NoiseNeighborhood) -> Result<BranchPlans> {
    if pivot == 0 || pivot > plan.chunks() {
        return Err(invalid(format!("pivot {pivot} outside 1..={}", plan.chunks())));
    }
    if hood.base != plan.init_noises[pivot - 1] {
        return Err(invalid(format!(
            "neighborhood base is not the plan's chunk-{pivot} initial noise"
        )));
    }
    let plans = hood
        .members
        .iter()
        .map(|m| {
            let mut p = plan.clone();
            p.init_noises[pivot - 1] = m.clone();
            p
        })
        .collect();
    Ok(BranchPlans { pivot, plans })
}

/// One noise tensor of a plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Site {
    Init { chunk: usize },
    Solver { chunk: usize, step: usize },
}

impl Site {
    pub fn chunk(&self) -> usize {
        match *self {
            Site::Init { chunk } | Site::Solver { chunk, .. } => chunk,
        }
    }

    fn check(&self, plan: &NoisePlan) -> Result<()> {
        let ok = match *self {
            Site::Init { chunk } => chunk >= 1 && chunk <= plan.chunks(),
            Site::Solver { chunk, step } => chunk >= 1 && chunk <= plan.chunks() && step >= 1 && step < plan.steps(),
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!(
                "site {self} not in plan with L={} T={}",
                plan.chunks(),
                plan.steps()
            )))
        }
    }

    /// The initial-noise site and every solver site of `chunk`.
    pub fn all_for_chunk(chunk: usize, steps: usize) -> Vec<Site> {
        std::iter::once(Site::Init { chunk })
            .chain((1..steps).map(|step| Site::Solver { chunk, step }))
            .collect()
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::Init { chunk } => write!(f, "init:{chunk}"),
            Site::Solver { chunk, step } => write!(f, "solver:{chunk}:{step}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteDivergence {
    pub site: Site,
    pub trials: usize,
    /// Mean L2 distance to the reference, per chunk.
    pub per_chunk: Vec<f64>,
    /// Mean L2 distance over the concatenated sequence.
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub reference: Vec<Vec<f64>>,
    pub sites: Vec<SiteDivergence>,
}

impl DivergenceReport {
    pub fn get(&self, site: Site) -> Option<&SiteDivergence> {
        self.sites.iter().find(|s| s.site == site)
    }

    /// Initial-noise divergence of `chunk` over its largest solver-site
    /// divergence. `None` unless both are present.
    pub fn dominance_ratio(&self, chunk: usize) -> Option<f64> {
        let init = self.get(Site::Init { chunk })?.total;
        let solver = self
            .sites
            .iter()
            .filter(|s| matches!(s.site, Site::Solver { chunk: c, .. } if c == chunk))
            .map(|s| s.total)
            .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))))?;
        Some(init / solver)
    }
}

/// Freeze `plan`, then for each site redraw only that site's noise `trials`
/// times and measure how far the completed sequence moves.
pub fn substitution_study(
    params: &ModelParams,
    prompt: &PromptSpec,
    plan: &NoisePlan,
    cfg: &SamplerConfig,
    sites: &[Site],
    trials: usize,
    stream: &RngStream,
) -> Result<DivergenceReport> {
    if trials == 0 {
        return Err(invalid("substitution study needs at least one trial"));
    }
    for s in sites {
        s.check(plan)?;
    }
    let chunks = plan.chunks();
    let reference = rollout_sequence(params, prompt, plan, cfg, chunks)?.chunks;
    let rows = sites
        .par_iter()
        .map(|&site| {
            let mut per_chunk = vec![0.0; chunks];
            let mut total = 0.0;
            for j in 1..=trials {
                let noise = stream
                    .child(format!("subst/{site}/trial.{j}"))
                    .gaussian(plan.chunk_dim())?;
                let perturbed = rollout_sequence(params, prompt, &plan.substitute(site, noise)?, cfg, chunks)?;
                for (q, (a, b)) in reference.iter().zip(&perturbed.chunks).enumerate() {
                    per_chunk[q] += vecops::sq_dist(a, b).sqrt();
                }
                total += vecops::sq_dist(&reference.concat(), &perturbed.flat()).sqrt();
            }
            let n = trials as f64;
            Ok(SiteDivergence {
                site,
                trials,
                per_chunk: per_chunk.into_iter().map(|x| x / n).collect(),
                total: total / n,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DivergenceReport { reference, sites: rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toygen::ModelDims;

    fn plan() -> NoisePlan {
        NoisePlan::generate(&RngStream::at(1, "plan"), 4, 3, 8).unwrap()
    }

    #[test]
    fn plan_shapes_and_determinism() {
        let a = plan();
        assert_eq!(a, plan());
        assert_eq!(a.chunks(), 4);
        assert_eq!(a.steps(), 3);
        assert!(a.solver_noises.iter().all(|s| s.len() == 2));
        let single = NoisePlan::generate(&RngStream::at(1, "plan"), 1, 1, 8).unwrap();
        assert_eq!(single.init_noises.len(), 1);
        assert!(single.solver_noises[0].is_empty());
    }

    #[test]
    fn distinct_seeds_differ_in_every_block() {
        let a = plan();
        let b = NoisePlan::generate(&RngStream::at(2, "plan"), 4, 3, 8).unwrap();
        for q in 0..4 {
            assert_ne!(a.init_noises[q], b.init_noises[q]);
            for k in 0..2 {
                assert_ne!(a.solver_noises[q][k], b.solver_noises[q][k]);
            }
        }
    }

    #[test]
    fn perturb_boundaries() {
        let base = RngStream::at(3, "b").gaussian(8).unwrap();
        let s = RngStream::at(3, "hood");
        let h0 = perturb(&base, 0.0, 4, &s).unwrap();
        assert!(h0.members.iter().all(|m| *m == base));
        let h1 = perturb(&base, 1.0, 4, &s).unwrap();
        for (m, d) in h1.members.iter().zip(&h1.deltas) {
            assert_eq!(m, d);
        }
    }

    #[test]
    fn perturb_hand_case() {
        let h = NoiseNeighborhood::from_deltas(&[1.0, 0.0], 0.5, vec![vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert!((h.members[0][0] - 0.866_025_403_784_438_6).abs() < 1e-15);
        assert_eq!(h.members[0][1], 0.5);
    }

    #[test]
    fn perturb_rejects_bad_args() {
        let s = RngStream::at(3, "hood");
        assert!(perturb(&[0.0; 4], -0.1, 4, &s).is_err());
        assert!(perturb(&[0.0; 4], 1.1, 4, &s).is_err());
        assert!(perturb(&[0.0; 4], 0.5, 1, &s).is_err());
    }

    #[test]
    fn fork_structure() {
        let p = plan();
        let s = RngStream::at(3, "hood");
        let hood = perturb(&p.init_noises[0], 0.5, 2, &s).unwrap();
        let b = fork(&p, 1, &hood).unwrap();
        assert_eq!(b.plans.len(), 2);
        assert_ne!(b.plans[0].init_noises[0], b.plans[1].init_noises[0]);
        assert_eq!(b.plans[0].init_noises[1..], b.plans[1].init_noises[1..]);
        assert_eq!(b.plans[0].solver_noises, b.plans[1].solver_noises);

        let last = perturb(&p.init_noises[3], 0.5, 3, &s).unwrap();
        let b = fork(&p, 4, &last).unwrap();
        for pl in &b.plans {
            assert_eq!(pl.init_noises[..3], p.init_noises[..3]);
        }

        let zero = perturb(&p.init_noises[1], 0.0, 3, &s).unwrap();
        let b = fork(&p, 2, &zero).unwrap();
        assert!(b.plans.iter().all(|pl| *pl == p));
    }

    #[test]
    fn fork_rejects_mismatched_base() {
        let p = plan();
        let s = RngStream::at(3, "hood");
        let hood = perturb(&p.init_noises[0], 0.5, 2, &s).unwrap();
        assert!(fork(&p, 2, &hood).is_err());
        assert!(fork(&p, 0, &hood).is_err());
        assert!(fork(&p, 5, &hood).is_err());
    }

    #[test]
    fn site_validation_and_identity_substitution() {
        let p = plan();
        assert!(p.substitute(Site::Solver { chunk: 1, step: 3 }, vec![0.0; 8]).is_err());
        assert!(p.substitute(Site::Init { chunk: 5 }, vec![0.0; 8]).is_err());
        let same = p.substitute(Site::Init { chunk: 2 }, p.init_noises[1].clone()).unwrap();
        assert_eq!(same, p);
        assert_eq!(Site::Solver { chunk: 2, step: 1 }.to_string(), "solver:2:1");
    }

    #[test]
    fn study_with_no_sites_is_reference_only() {
        let params = ModelParams::init(ModelDims::default(), &RngStream::at(1, "m")).unwrap();
        let prompt = PromptSpec::new(1, 8).unwrap();
        let r = substitution_study(
            &params,
            &prompt,
            &plan(),
            &SamplerConfig::default(),
            &[],
            2,
            &RngStream::at(1, "st"),
        )
        .unwrap();
        assert!(r.sites.is_empty());
        assert_eq!(r.reference.len(), 4);
        assert!(r.dominance_ratio(1).is_none());
    }
}
