//! Robustmax likelihood: the class distribution puts mass 1−β on the argmax
//! of the latent vector and spreads β evenly over the rest. Class
//! probabilities under independent Gaussian marginals reduce to
//! one-dimensional integrals handled by Gauss-Hermite quadrature:
//!
//!   P_c = (1/√π) Σ_h w_h Π_{j≠c} Φ((μ_c + √2 σ_c g_h − μ_j)/σ_j)
//!
//! Gradients flow through the quadrature because nodes and weights are
//! constants — only μ and σ live on the tape.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::quadrature::{gauss_hermite, SQRT_PI};
use crate::tensor::Tensor;
use std::f64::consts::SQRT_2;

/// Mixing weight of the likelihood: either a fixed constant or a trainable
/// logit mapped through β = 0.5·sigmoid(logit), keeping β ∈ (0, 0.5).
#[derive(Debug, Clone)]
pub enum BetaParam {
    Fixed(f64),
    Learnable { logit: Tensor },
}

impl BetaParam {
    pub fn fixed(beta: f64) -> Result<Self> {
        check_beta_range(beta)?;
        Ok(BetaParam::Fixed(beta))
    }

    /// Learnable β starting at `beta0`; the stored parameter is the logit.
    pub fn learnable(beta0: f64) -> Result<Self> {
        check_beta_range(beta0)?;
        let s = 2.0 * beta0;
        Ok(BetaParam::Learnable {
            logit: Tensor::scalar((s / (1.0 - s)).ln()),
        })
    }

    /// Current β value.
    pub fn value(&self) -> f64 {
        match self {
            BetaParam::Fixed(b) => *b,
            BetaParam::Learnable { logit } => {
                let l = logit.item().expect("beta logit is scalar");
                0.5 / (1.0 + (-l).exp())
            }
        }
    }

    pub fn bind(&self, g: &Graph, trainable: bool) -> Result<BetaVar> {
        Ok(match self {
            BetaParam::Fixed(b) => BetaVar::Fixed(*b),
            BetaParam::Learnable { logit } => {
                let v = if trainable { g.var(logit.clone())? } else { g.constant(logit.clone())? };
                BetaVar::Learnable(v)
            }
        })
    }
}

fn check_beta_range(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta < 0.5) {
        return Err(Error::InvalidArg(format!("beta must lie in (0, 0.5), got {}", beta)));
    }
    Ok(())
}

/// Graph-bound β.
pub enum BetaVar {
    Fixed(f64),
    Learnable(Var),
}

impl BetaVar {
    /// β as a scalar var (a constant for the fixed case).
    pub fn beta(&self, g: &Graph) -> Result<Var> {
        match self {
            BetaVar::Fixed(b) => g.constant(Tensor::scalar(*b)),
            BetaVar::Learnable(logit) => logit.sigmoid()?.affine(0.5, 0.0),
        }
    }

    /// The trainable logit var, if any.
    pub fn logit_var(&self) -> Option<Var> {
        match self {
            BetaVar::Fixed(_) => None,
            BetaVar::Learnable(v) => Some(v.clone()),
        }
    }
}

fn normal_cdf_plain(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// P(argmax f = c) for each row under independent Gaussians f_c ~ N(μ_c, v_c).
///
/// mu, var: [B, C] with strictly positive variances; `h` quadrature nodes.
/// The quadrature rule itself is consistent only up to its numerical error
/// (row sums ≈ 1 ± 1e-5 at H=20), so rows are renormalized on the tape: the
/// symmetric case then yields exactly 1/C and downstream probabilities sum to
/// 1 at machine precision, while the division stays differentiable.
pub fn argmax_probs(mu: &Var, var: &Var, h: usize) -> Result<Var> {
    let raw = argmax_probs_raw(mu, var, h)?;
    let b = raw.shape()[0];
    let s = raw.sum(Some(1))?.reshape(&[b, 1])?;
    raw.div(&s)
}

/// The bare quadrature rule before row normalization. The product over j ≠ c
/// is computed as the product over all j divided by the diagonal factor
/// Φ(√2 g_h) — a per-node constant, so the division is exact and the gradient
/// is untouched.
fn argmax_probs_raw(mu: &Var, var: &Var, h: usize) -> Result<Var> {
    let shape = mu.shape();
    if shape.len() != 2 || var.shape() != shape {
        return Err(Error::shape("argmax_probs", "mu and var must both be [batch, classes]"));
    }
    let (b, c) = (shape[0], shape[1]);
    if c < 2 {
        return Err(Error::InvalidArg("argmax_probs: need at least two classes".into()));
    }
    for (i, &v) in var.value().data().iter().enumerate() {
        if v <= 0.0 {
            return Err(Error::Numerical(format!(
                "argmax_probs: nonpositive variance {} at flat index {}",
                v, i
            )));
        }
    }
    let (nodes, weights) = gauss_hermite(h)?;

    let sigma = var.sqrt()?;
    let mu_j = mu.reshape(&[b, 1, c])?;
    let sigma_j = sigma.reshape(&[b, 1, c])?;

    let mut acc: Option<Var> = None;
    for (&g_h, &w_h) in nodes.iter().zip(&weights) {
        let center = mu.add(&sigma.affine(SQRT_2 * g_h, 0.0)?)?.reshape(&[b, c, 1])?;
        let t = center.sub(&mu_j)?.div(&sigma_j)?;
        let prod_all = t.normal_cdf()?.prod(Some(2))?;
        let diag = normal_cdf_plain(SQRT_2 * g_h);
        let term = prod_all.affine(w_h / (SQRT_PI * diag), 0.0)?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term)?,
        });
    }
    acc.ok_or_else(|| Error::InvalidArg("argmax_probs: empty quadrature rule".into()))
}

fn check_row_sums(p: &Var, what: &str) -> Result<(usize, usize)> {
    let shape = p.shape();
    if shape.len() != 2 {
        return Err(Error::shape(what, "probabilities must be [batch, classes]"));
    }
    let (b, c) = (shape[0], shape[1]);
    let vals = p.value();
    for i in 0..b {
        let s: f64 = vals.data()[i * c..(i + 1) * c].iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Numerical(format!(
                "{}: row {} of argmax probabilities sums to {}, more than 1e-6 from 1",
                what, i, s
            )));
        }
    }
    Ok((b, c))
}

/// Mix argmax probabilities with the β floor: p(y=c) = (1−β)P_c + β/(C−1)·(1−P_c).
///
/// Input rows must sum to 1 within 1e-6 (quadrature consistency); they are
/// renormalized on the tape so output rows sum to 1 at machine precision.
pub fn predictive_probs(g: &Graph, p: &Var, beta: &BetaVar) -> Result<Var> {
    let (b, c) = check_row_sums(p, "predictive_probs")?;
    let s = p.sum(Some(1))?.reshape(&[b, 1])?;
    let pn = p.div(&s)?;
    let beta_v = beta.beta(g)?;
    let keep = beta_v.affine(-1.0, 1.0)?;
    let floor = beta_v.affine(1.0 / (c as f64 - 1.0), 0.0)?;
    pn.mul(&keep)?.add(&pn.affine(-1.0, 1.0)?.mul(&floor)?)
}

/// Per-example variational expectation of the log-likelihood:
/// E_q[log p(y|f)] = P_y log(1−β) + (1−P_y) log(β/(C−1)).
pub fn variational_expectation(g: &Graph, p: &Var, beta: &BetaVar, labels: &[usize]) -> Result<Var> {
    let shape = p.shape();
    if shape.len() != 2 {
        return Err(Error::shape("variational_expectation", "probabilities must be [batch, classes]"));
    }
    let (b, c) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(Error::shape("variational_expectation", "one label per batch row"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArg(format!(
            "variational_expectation: label {} out of range for {} classes",
            bad, c
        )));
    }
    let py = p.gather_rows(labels)?;
    let beta_v = beta.beta(g)?;
    let log_keep = beta_v.affine(-1.0, 1.0)?.log()?;
    let log_floor = beta_v.affine(1.0 / (c as f64 - 1.0), 0.0)?.log()?;
    py.mul(&log_keep)?.add(&py.affine(-1.0, 1.0)?.mul(&log_floor)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const QUAD_H: usize = 20;

    fn fixed_beta(g: &Graph) -> BetaVar {
        let _ = g;
        BetaVar::Fixed(1e-3)
    }

    #[test]
    fn identical_latents_give_uniform_probs() {
        let g = Graph::new();
        let c = 10;
        let mu = g.constant(Tensor::full(&[3, c], 0.7)).unwrap();
        let var = g.constant(Tensor::full(&[3, c], 2.3)).unwrap();
        let p = argmax_probs(&mu, &var, QUAD_H).unwrap().value();
        for &v in p.data() {
            assert!((v - 1.0 / c as f64).abs() < 1e-10, "got {}", v);
        }
    }

    #[test]
    fn dominated_latent_takes_all_mass() {
        let g = Graph::new();
        let mut mu = Tensor::zeros(&[1, 10]);
        mu.data_mut()[0] = 100.0;
        let mu = g.constant(mu).unwrap();
        let var = g.constant(Tensor::full(&[1, 10], 1.0)).unwrap();
        let p = argmax_probs(&mu, &var, QUAD_H).unwrap().value();
        assert!((p.data()[0] - 1.0).abs() < 1e-10);
        for &v in &p.data()[1..] {
            assert!(v.abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_nonpositive_variance() {
        let g = Graph::new();
        let mu = g.constant(Tensor::zeros(&[1, 3])).unwrap();
        let mut v = Tensor::full(&[1, 3], 1.0);
        v.data_mut()[1] = 0.0;
        let var = g.constant(v).unwrap();
        assert!(argmax_probs(&mu, &var, QUAD_H).is_err());
    }

    #[test]
    fn predictive_one_hot_and_uniform() {
        let g = Graph::new();
        let beta = fixed_beta(&g);
        let mut onehot = Tensor::zeros(&[1, 10]);
        onehot.data_mut()[4] = 1.0;
        let p = predictive_probs(&g, &g.constant(onehot).unwrap(), &beta).unwrap().value();
        assert!((p.data()[4] - 0.999).abs() < 1e-12);
        for (i, &v) in p.data().iter().enumerate() {
            if i != 4 {
                assert!((v - 1e-3 / 9.0).abs() < 1e-15, "floor prob {}", v);
            }
        }

        let uni = Tensor::full(&[2, 10], 0.1);
        let p = predictive_probs(&g, &g.constant(uni).unwrap(), &beta).unwrap().value();
        for &v in p.data() {
            assert!((v - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn predictive_rows_sum_to_one_tightly() {
        let g = Graph::new();
        let beta = fixed_beta(&g);
        // rows off by just under the 1e-6 tolerance still normalize cleanly
        let mut t = Tensor::full(&[4, 10], 0.1);
        t.data_mut()[3] += 9e-7;
        let p = predictive_probs(&g, &g.constant(t).unwrap(), &beta).unwrap().value();
        for i in 0..4 {
            let s: f64 = p.data()[i * 10..(i + 1) * 10].iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {} sums to {}", i, s);
        }
    }

    #[test]
    fn predictive_rejects_bad_row_sums() {
        let g = Graph::new();
        let beta = fixed_beta(&g);
        let t = Tensor::full(&[1, 10], 0.11);
        assert!(predictive_probs(&g, &g.constant(t).unwrap(), &beta).is_err());
    }

    #[test]
    fn variational_expectation_endpoints() {
        let g = Graph::new();
        let beta = fixed_beta(&g);
        let mut p = Tensor::zeros(&[2, 10]);
        p.data_mut()[0] = 1.0; // row 0: P_y = 1 for label 0
        p.data_mut()[10 + 3] = 1.0; // row 1: mass on class 3, label 0 → P_y = 0
        let ve = variational_expectation(&g, &g.constant(p).unwrap(), &beta, &[0, 0])
            .unwrap()
            .value();
        assert!((ve.data()[0] - 0.999f64.ln()).abs() < 1e-12);
        let floor = (1e-3f64 / 9.0).ln();
        assert!((ve.data()[1] - floor).abs() < 1e-12);
        assert!((floor - (-9.105)).abs() < 5e-4, "floor ≈ −9.105, got {}", floor);
    }

    #[test]
    fn variational_expectation_rejects_bad_labels() {
        let g = Graph::new();
        let beta = fixed_beta(&g);
        let p = g.constant(Tensor::full(&[1, 4], 0.25)).unwrap();
        assert!(variational_expectation(&g, &p, &beta, &[4]).is_err());
        assert!(variational_expectation(&g, &p, &beta, &[0, 1]).is_err());
    }

    #[test]
    fn beta_param_bijection() {
        let b = BetaParam::learnable(1e-3).unwrap();
        assert!((b.value() - 1e-3).abs() < 1e-12);
        if let BetaParam::Learnable { logit } = &b {
            let l = logit.item().unwrap();
            assert!((l - (-6.2126)).abs() < 1e-3, "init logit ≈ −6.2126, got {}", l);
        }
        assert!(BetaParam::fixed(0.5).is_err());
        assert!(BetaParam::fixed(0.0).is_err());

        // graph-side mapping agrees with the plain value
        let g = Graph::new();
        let bound = b.bind(&g, false).unwrap();
        let beta_v = bound.beta(&g).unwrap().value().item().unwrap();
        assert!((beta_v - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn argmax_probs_rows_sum_near_one() {
        let g = Graph::new();
        // deterministic mildly random instance
        let (b, c) = (5, 10);
        let mu_t = Tensor::new(
            &[b, c],
            (0..b * c).map(|i| ((i * 2654435761) % 1000) as f64 / 250.0 - 2.0).collect(),
        )
        .unwrap();
        let var_t = Tensor::new(
            &[b, c],
            (0..b * c).map(|i| 0.3 + ((i * 40503) % 997) as f64 / 500.0).collect(),
        )
        .unwrap();
        let mu = g.constant(mu_t).unwrap();
        let var = g.constant(var_t).unwrap();
        // the bare rule carries inherent quadrature error that shrinks fast in H
        let raw20 = argmax_probs_raw(&mu, &var, QUAD_H).unwrap().value();
        let raw50 = argmax_probs_raw(&mu, &var, 50).unwrap().value();
        for i in 0..b {
            let s20: f64 = raw20.data()[i * c..(i + 1) * c].iter().sum();
            let s50: f64 = raw50.data()[i * c..(i + 1) * c].iter().sum();
            assert!((s20 - 1.0).abs() < 5e-4, "raw H=20 row {} sums to {}", i, s20);
            assert!((s50 - 1.0).abs() < 1e-6, "raw H=50 row {} sums to {}", i, s50);
        }
        let p = argmax_probs(&mu, &var, QUAD_H).unwrap().value();
        for i in 0..b {
            let s: f64 = p.data()[i * c..(i + 1) * c].iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "normalized row {} sums to {}", i, s);
        }
    }
}
