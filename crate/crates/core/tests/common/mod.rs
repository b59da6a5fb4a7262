#![allow(dead_code)]

use arcopo::copo::CopoConfig;
use arcopo::numerics::RngStream;
use arcopo::rollout::ArcopoConfig;
use arcopo::toygen::{ModelDims, ModelParams};

pub const MICRO: ModelDims = ModelDims {
    chunk_dim: 3,
    context_dim: 4,
    hidden1: 5,
    hidden2: 4,
};

pub fn micro_model(seed: u64) -> ModelParams {
    ModelParams::init(MICRO, &RngStream::at(seed, "micro")).unwrap()
}

/// Short sequences and small groups so tests stay fast.
pub fn small_config() -> ArcopoConfig {
    ArcopoConfig {
        chunks: 4,
        copo: CopoConfig {
            group_size: 6,
            anchor_batch: 3,
            ..CopoConfig::default()
        },
        ..ArcopoConfig::default()
    }
}

/// Pearson chi-square statistic of observed counts against equal expected
/// counts.
pub fn chi_square_uniform(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
}

/// Chi-square independence statistic of a contingency table.
pub fn chi_square_independence(table: &[Vec<usize>]) -> f64 {
    let n: f64 = table.iter().flatten().sum::<usize>() as f64;
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum::<usize>() as f64).collect();
    let cols: Vec<f64> = (0..table[0].len())
        .map(|j| table.iter().map(|r| r[j]).sum::<usize>() as f64)
        .collect();
    let mut stat = 0.0;
    for (i, r) in table.iter().enumerate() {
        for (j, &o) in r.iter().enumerate() {
            let e = rows[i] * cols[j] / n;
            stat += (o as f64 - e).powi(2) / e;
        }
    }
    stat
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Member-coordinate variance and member/base correlation over at least
/// `coords` neighborhood coordinates (groups of 12, dimension 8).
pub fn neighborhood_moments(sigma: f64, coords: usize) -> (f64, f64) {
    use arcopo::neighborhood::perturb;
    let (g, d) = (12, 8);
    let groups = coords.div_ceil(g * d);
    let (mut n, mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for k in 0..groups as u64 {
        let base = RngStream::at(k, "moments/base").gaussian(d).unwrap();
        let hood = perturb(&base, sigma, g, &RngStream::at(k, "moments/hood")).unwrap();
        for m in &hood.members {
            for (x, y) in m.iter().zip(&base) {
                n += 1.0;
                sx += x;
                sy += y;
                sxx += x * x;
                syy += y * y;
                sxy += x * y;
            }
        }
    }
    let var_x = sxx / n - (sx / n).powi(2);
    let var_y = syy / n - (sy / n).powi(2);
    let cov = sxy / n - sx * sy / (n * n);
    (var_x, cov / (var_x * var_y).sqrt())
}

/// Worst relative error between the objective gradient and central finite
/// differences at one random micro-model point, and whether a single SGD
/// step of `copo_update` moved the parameters along that gradient.
pub fn micro_gradient_check(point: u64) -> (f64, bool) {
    use arcopo::copo::{copo_update, group_advantages, pivot_objective_grad, select_anchors, ObjectiveSpec};
    use arcopo::numerics::{finite_diff_grad, max_relative_error};
    use arcopo::optim::{Optimizer, OptimizerKind};
    use arcopo::rewards::{PromptSpec, RewardKind, RewardSpec};
    use arcopo::rollout::arcopo_iteration;
    use arcopo::toygen::{SamplerConfig, SamplerKind};

    let mut cfg = small_config();
    cfg.reward = RewardSpec::of_kind(RewardKind::Composite);
    cfg.copo.clip_eps = 0.2;
    if point % 2 == 1 {
        cfg.sampler = SamplerConfig {
            kind: SamplerKind::FlowOde,
            timesteps: vec![1.0, 0.7, 0.4, 0.2],
        };
    }
    let old = micro_model(100 + point);
    let prompt = PromptSpec::new(point, MICRO.chunk_dim).unwrap();
    let s = RngStream::at(point, "fd");
    let (entry, _) = arcopo_iteration(&old, &old, &prompt, &cfg, &s.child("rollout")).unwrap();
    // move away from the old policy so ratios differ from one
    let shift = s.child("shift").gaussian(old.values.len()).unwrap();
    let values: Vec<f64> = old.values.iter().zip(&shift).map(|(v, d)| v + 0.02 * d).collect();
    let current = ModelParams::from_values(MICRO, values).unwrap();
    let adv = group_advantages(&entry.rewards, 1e-8).unwrap().values;
    let anchors = select_anchors(cfg.copo.group_size, cfg.copo.anchor_batch, &s.child("anchors")).unwrap();
    let tau = arcopo::copo::resolve_temperature(&entry, &cfg.copo).unwrap();
    let spec = ObjectiveSpec {
        adv: &adv,
        anchors: &anchors,
        tau,
        clip_eps: Some(cfg.copo.clip_eps),
        fm_step: cfg.copo.fm_step,
    };
    let (_, g, _) = pivot_objective_grad(&current, &entry, &spec).unwrap();
    let f = |w: &[f64]| {
        let q = ModelParams::from_values(MICRO, w.to_vec())?;
        Ok(pivot_objective_grad(&q, &entry, &spec)?.0)
    };
    let fd = finite_diff_grad(f, &current.values, 1e-5).unwrap();
    let err = max_relative_error(&g, &fd, 1e-8);

    let lr = 1e-3;
    let mut updated = current.clone();
    let mut opt = Optimizer::new(OptimizerKind::Sgd, lr, updated.values.len());
    let one_step = CopoConfig {
        update_steps: 1,
        ..cfg.copo.clone()
    };
    copo_update(&mut updated, &mut opt, &entry, &one_step, tau, true, &anchors).unwrap();
    let moved = updated
        .values
        .iter()
        .zip(&current.values)
        .zip(&g)
        .all(|((u, c), gi)| (u - (c + lr * gi)).abs() <= 1e-15 * c.abs().max(1.0));
    (err, moved)
}

/// The default reference generator, pretrained once per test binary.
pub fn reference() -> &'static ModelParams {
    use arcopo::cli::ExperimentConfig;
    use std::sync::OnceLock;
    static REF: OnceLock<ModelParams> = OnceLock::new();
    REF.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        arcopo::toygen::pretrain_reference(cfg.seed, cfg.schedule.pretrain_steps, &cfg.pretrain)
            .unwrap()
            .params
    })
}
