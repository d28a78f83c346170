//! Shared test oracles: central finite differences and tolerance helpers.
//! These are deliberately independent of the tape — they only ever call a
//! black-box closure mapping flat parameters to a scalar loss.

#![allow(dead_code)]

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Relative error with an absolute floor: |a-b| / max(|a|, |b|) unless both
/// are tiny, in which case the absolute difference decides.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter().zip(b).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}

/// Assert every analytic/numeric gradient pair agrees to `tol` relative
/// error, with a readable report on failure.
pub fn assert_grads_close(analytic: &[f64], numeric: &[f64], tol: f64, what: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{}: gradient length mismatch", what);
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = rel_err(a, n);
        assert!(
            e <= tol,
            "{}: component {} disagrees: analytic {:.12e} vs numeric {:.12e} (rel err {:.3e}, tol {:.1e})",
            what,
            i,
            a,
            n,
            e,
            tol
        );
    }
}

/// Deterministic pseudo-random values in [-1, 1] without an RNG dependency:
/// good enough to fill test tensors away from ReLU kinks and ties.
pub fn wobble(seed: u64, n: usize) -> Vec<f64> {
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}
