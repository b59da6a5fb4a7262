//! Small dense helpers over `f64` slices.

use crate::error::{invalid, Result};

/// `y = W x + b` with `W` stored row-major as `rows x cols`.
///
/// The accumulation order (bias last) is shared with the tape so that plain
/// and recorded forward passes agree bit for bit.
#[inline]
pub fn affine(w: &[f64], b: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(b.len(), rows);
    debug_assert_eq!(x.len(), cols);
    (0..rows)
        .map(|r| {
            let row = &w[r * cols..(r + 1) * cols];
            let mut acc = 0.0;
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            acc + b[r]
        })
        .collect()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn mean(a: &[f64]) -> f64 {
    a.iter().sum::<f64>() / a.len() as f64
}

/// Population standard deviation.
pub fn pop_std(a: &[f64]) -> f64 {
    let m = mean(a);
    (a.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / a.len() as f64).sqrt()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// Softmax over negative scaled distances, `p_i ∝ exp(-d_i / tau)`.
///
/// The smallest distance is subtracted before exponentiating, so huge
/// distances underflow to zero probability instead of overflowing.
pub fn softmax_neg_scaled(distances: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    if distances.is_empty() {
        return Err(invalid("softmax over an empty set"));
    }
    if !all_finite(distances) {
        return Err(invalid("non-finite distance"));
    }
    let dmin = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = distances.iter().map(|d| (-(d - dmin) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / z).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_uniform_on_equal_distances() {
        let p = softmax_neg_scaled(&[1.0, 1.0, 1.0], 0.5).unwrap();
        for x in p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_hand_case() {
        for tau in [0.1, 1.0, 7.5] {
            let p = softmax_neg_scaled(&[0.0, tau * 3f64.ln()], tau).unwrap();
            assert!((p[0] - 0.75).abs() < 1e-12);
            assert!((p[1] - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_dominance_without_overflow() {
        let p = softmax_neg_scaled(&[0.0, 1e6], 1.0).unwrap();
        assert_eq!(p[0], 1.0);
        assert_eq!(p[1], 0.0);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax_neg_scaled(&[1.0], 0.0).is_err());
        assert!(softmax_neg_scaled(&[1.0], -1.0).is_err());
        assert!(softmax_neg_scaled(&[f64::NAN, 1.0], 1.0).is_err());
        assert!(softmax_neg_scaled(&[f64::INFINITY], 1.0).is_err());
    }

    #[test]
    fn affine_matches_hand_evaluation() {
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y = affine(&w, &[0.5, -0.5], &[1.0, 0.0, -1.0], 2, 3);
        assert_eq!(y, vec![-1.5, -2.5]);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_equivariant(
            d in prop::collection::vec(0.0f64..50.0, 2..16),
            tau in 0.01f64..10.0,
            rot in 0usize..16,
        ) {
            let p = softmax_neg_scaled(&d, tau).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            let k = rot % d.len();
            let mut dr = d.clone();
            dr.rotate_left(k);
            let mut pr_expected = p.clone();
            pr_expected.rotate_left(k);
            let pr = softmax_neg_scaled(&dr, tau).unwrap();
            for (a, b) in pr.iter().zip(&pr_expected) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
        }

        #[test]
        fn softmax_invariant_to_joint_scaling(
            d in prop::collection::vec(0.0f64..5.0, 2..8),
            tau in 0.1f64..3.0,
        ) {
            // Power-of-two scaling is exact in floating point.
            let p = softmax_neg_scaled(&d, tau).unwrap();
            let ds: Vec<f64> = d.iter().map(|x| x * 4.0).collect();
            let ps = softmax_neg_scaled(&ds, tau * 4.0).unwrap();
            prop_assert_eq!(p, ps);
        }
    }
}
