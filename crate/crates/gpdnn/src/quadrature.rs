//! Gauss-Hermite quadrature rules for integrals of the form
//! ∫ f(t) exp(-t²) dt ≈ Σ_h w_h f(t_h) (physicists' weight function).

use crate::error::{Error, Result};

pub const SQRT_PI: f64 = 1.772453850905516;

/// Largest supported rule; Newton initial guesses are tuned for this range.
pub const MAX_NODES: usize = 100;

/// Nodes and weights of the H-point Gauss-Hermite rule, nodes ascending.
///
/// Roots of the degree-H Hermite polynomial are found by Newton iteration on
/// the orthonormal three-term recurrence, walking inward from an asymptotic
/// initial guess for the largest root; each converged root seeds the guess
/// for the next one. Weights come from the derivative of the recurrence.
/// The rule is exact for polynomials up to degree 2H-1 and satisfies
/// Σ w_h = √π.
pub fn gauss_hermite(h: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if h == 0 || h > MAX_NODES {
        return Err(Error::InvalidArg(format!(
            "gauss_hermite: node count must be in 1..={}, got {}",
            MAX_NODES, h
        )));
    }
    let n = h;
    let mut x = vec![0.0f64; n];
    let mut w = vec![0.0f64; n];

    // pim4 = pi^(-1/4), the normalization of the orthonormal Hermite ladder
    let pim4 = 0.7511255444649425_f64;
    let eps = 3.0e-14;
    let m = (n + 1) / 2;

    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => {
                let nf = n as f64;
                (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0)
            }
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            // previously found roots live at the top of the ascending array
            2 => 1.86 * z - 0.86 * x[n - 1],
            3 => 1.91 * z - 0.91 * x[n - 2],
            _ => 2.0 * z - x[n - 1 - (i - 2)],
        };

        let mut pp = 0.0;
        let mut converged = false;
        for _ in 0..200 {
            let mut p1 = pim4;
            let mut p2 = 0.0f64;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= eps {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Numerical(format!(
                "gauss_hermite: Newton iteration failed to converge for H={}",
                n
            )));
        }

        // store the positive root high, its mirror low; ascending order overall
        x[n - 1 - i] = z;
        x[i] = -z;
        let wi = 2.0 / (pp * pp);
        w[n - 1 - i] = wi;
        w[i] = wi;
    }

    // odd rule: the middle node is exactly zero by symmetry
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    Ok((x, w))
}
