//! Shared test oracles: central finite differences and tolerance checks.
//!
//! The finite-difference oracle only re-runs forward passes; it is independent
//! of the backward implementation it is used to check.
#![allow(dead_code)] // each test target uses its own subset

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-6;

/// Central-difference gradient of a scalar function at `x`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Worst elementwise deviation, scored as |a-n| / max(abs_floor, |a|, |n|).
pub fn assert_close(analytic: &[f64], numeric: &[f64], rel_tol: f64, abs_tol: f64, what: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length mismatch");
    for (i, (&a, &n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        let diff = (a - n).abs();
        let scale = a.abs().max(n.abs());
        if diff > abs_tol && diff > rel_tol * scale {
            panic!(
                "{what}: component {i} analytic {a:.9e} vs numeric {n:.9e} \
                 (diff {diff:.3e}, rel {:.3e})",
                diff / scale.max(f64::MIN_POSITIVE)
            );
        }
    }
}

/// Uniform values in (lo, hi), reproducible per seed.
pub fn random_values(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Uniform values kept at least `margin` away from every point in `kinks`,
/// so finite differences never straddle a non-smooth point.
pub fn random_values_away_from(
    rng: &mut ChaCha8Rng,
    n: usize,
    lo: f64,
    hi: f64,
    kinks: &[f64],
    margin: f64,
) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > margin) {
                return v;
            }
        })
        .collect()
}
