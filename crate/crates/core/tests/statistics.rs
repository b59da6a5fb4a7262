//! Distributional checks on the random streams and the sampled structure.

mod common;

use arcopo::copo::select_anchors;
use arcopo::neighborhood::perturb;
use arcopo::numerics::RngStream;
use arcopo::rewards::PromptSpec;
use arcopo::rollout::arcopo_iteration;
use arcopo::semipolicy::collect_buffer;
use common::*;

// upper 1% points of the chi-square distribution
const CHI2_99_DF81: f64 = 113.5124;
const CHI2_99_DF5: f64 = 15.0863;
const CHI2_99_DF3: f64 = 11.3449;

#[test]
fn sibling_streams_are_independent() {
    let mut a = RngStream::at(11, "iter.3/chunk.2/solver.1");
    let mut b = RngStream::at(11, "iter.3/chunk.2/solver.2");
    let mut table = vec![vec![0usize; 10]; 10];
    for _ in 0..10_000 {
        let i = (a.uniform() * 10.0) as usize;
        let j = (b.uniform() * 10.0) as usize;
        table[i][j] += 1;
    }
    let stat = chi_square_independence(&table);
    assert!(stat < CHI2_99_DF81, "chi-square {stat}");
}

#[test]
fn uniform_draws_fill_bins_evenly() {
    let mut s = RngStream::at(5, "bins");
    let mut counts = vec![0usize; 6];
    for _ in 0..10_000 {
        counts[s.index(6).unwrap()] += 1;
    }
    assert!(chi_square_uniform(&counts) < CHI2_99_DF5);
}

#[test]
fn neighborhood_keeps_unit_marginals() {
    for sigma in [0.25, 0.5, 0.9] {
        let (var, corr) = neighborhood_moments(sigma, 100_000);
        assert!((var - 1.0).abs() < 0.05, "sigma {sigma}: variance {var}");
        let expected = (1.0 - sigma * sigma).sqrt();
        assert!(
            (corr - expected).abs() < 0.05,
            "sigma {sigma}: corr {corr} vs {expected}"
        );
    }
}

#[test]
fn zero_radius_neighborhood_is_the_base() {
    let base = RngStream::at(1, "b").gaussian(8).unwrap();
    let hood = perturb(&base, 0.0, 12, &RngStream::at(1, "h")).unwrap();
    assert!(hood.members.iter().all(|m| *m == base));
}

#[test]
fn pivots_cover_every_chunk() {
    let p = micro_model(1);
    let cfg = small_config();
    let prompt = PromptSpec::new(3, p.dims.chunk_dim).unwrap();
    let l = cfg.chunks;
    let mut counts = vec![0usize; l];
    let n = 1000;
    for i in 1..=n {
        let (e, _) = arcopo_iteration(&p, &p, &prompt, &cfg, &RngStream::at(2, &format!("cover.{i}"))).unwrap();
        assert!((1..=l).contains(&e.pivot));
        counts[e.pivot - 1] += 1;
    }
    let q = 1.0 / l as f64;
    let se = (q * (1.0 - q) / n as f64).sqrt();
    for c in counts {
        assert!((c as f64 / n as f64 - q).abs() < 3.0 * se, "{c} of {n}");
    }
}

#[test]
fn buffer_pivots_are_uniform() {
    let p = micro_model(2);
    let cfg = arcopo::rollout::ArcopoConfig {
        chunks: 6,
        ..small_config()
    };
    let prompts = PromptSpec::set(10, 4, p.dims.chunk_dim).unwrap();
    let buf = collect_buffer(&p, &prompts, &cfg, 100, &RngStream::new(4)).unwrap();
    let mut counts = vec![0usize; 6];
    for e in &buf.entries {
        counts[e.pivot - 1] += 1;
    }
    assert!(chi_square_uniform(&counts) < CHI2_99_DF5, "{counts:?}");
}

#[test]
fn anchors_are_symmetric_over_candidates() {
    let mut counts = vec![0usize; 4];
    for i in 0..4000 {
        let a = select_anchors(4, 2, &RngStream::at(8, &format!("a.{i}"))).unwrap();
        assert_ne!(a[0], a[1]);
        for k in a {
            counts[k] += 1;
        }
    }
    assert!(chi_square_uniform(&counts) < CHI2_99_DF3, "{counts:?}");
}
