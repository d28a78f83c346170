//! Sparse variational Gaussian-process head with a whitened parameterization.
//!
//! The head keeps M inducing inputs Z in feature space and, per class c, a
//! free-form Gaussian over whitened inducing values: q(v_c) = N(m_c, L_c L_cᵀ)
//! with prior N(0, I). Marginals at a feature batch X are
//!
//!   A   = L_zz⁻¹ K_zx                      (L_zz = chol(K_zz + jitter·I))
//!   μ_c = Aᵀ m_c
//!   v_c = k_xx − Σ_rows(A∘A) + Σ_rows((L_cᵀA)∘(L_cᵀA))
//!
//! and the KL to the whitened prior is ½ Σ_c [tr S_c + m_cᵀm_c − M − log|S_c|].
//!
//! All hyperparameters are log-parameterized; L_c stores its strictly-lower
//! part and the log of its diagonal separately so positivity is structural.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::linalg::cholesky_factor;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Rbf,
    Linear,
}

/// Plain-valued kernel hyperparameters, log-parameterized so positivity is
/// structural. The graph-side computation reads the same quantities from
/// bound vars; this struct serves the non-differentiable paths (reference
/// kernel evaluation, jitter selection, initialization).
#[derive(Debug, Clone, Copy)]
pub struct KernelParams {
    pub kind: KernelKind,
    pub log_sf2: f64,
    /// rbf only
    pub log_len: Option<f64>,
    pub log_noise: f64,
}

const JITTER_START: f64 = 1e-6;
const JITTER_MAX: f64 = 1e-2;
const DEFAULT_NOISE: f64 = 1e-3;
const MEDIAN_HEURISTIC_CAP: usize = 1024;

/// Reference kernel evaluation with plain loops.
///
/// This is the ground-truth definition the tape builders are checked against,
/// and the path used for non-differentiable work (jitter selection, init).
/// `same_inputs` adds the white-noise term σ_n² on the diagonal; cross
/// covariances between distinct sets never include it.
pub fn kernel_matrix(params: &KernelParams, a: &Tensor, b: &Tensor, same_inputs: bool) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::shape("kernel_matrix", "inputs must be [n, d] with matching d"));
    }
    let (na, d) = (a.shape()[0], a.shape()[1]);
    let nb = b.shape()[0];
    let sf2 = params.log_sf2.exp();
    let noise = params.log_noise.exp();
    let inv2l2 = match params.kind {
        KernelKind::Rbf => {
            let ll = params.log_len.ok_or_else(|| {
                Error::InvalidArg("kernel_matrix: rbf kernel needs a lengthscale".into())
            })?;
            0.5 * (-2.0 * ll).exp()
        }
        KernelKind::Linear => 0.0,
    };
    let mut k = vec![0.0f64; na * nb];
    for i in 0..na {
        let ai = &a.data()[i * d..(i + 1) * d];
        for j in 0..nb {
            let bj = &b.data()[j * d..(j + 1) * d];
            let v = match params.kind {
                KernelKind::Rbf => {
                    let mut d2 = 0.0;
                    for t in 0..d {
                        let diff = ai[t] - bj[t];
                        d2 += diff * diff;
                    }
                    sf2 * (-d2 * inv2l2).exp()
                }
                KernelKind::Linear => {
                    let mut dot = 0.0;
                    for t in 0..d {
                        dot += ai[t] * bj[t];
                    }
                    sf2 * dot
                }
            };
            k[i * nb + j] = v + if same_inputs && i == j { noise } else { 0.0 };
        }
    }
    Tensor::new(&[na, nb], k)
}

/// Trainable state of the GP head. Tensors here are the persistent storage;
/// `bind` lifts them onto a graph for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct GpHead {
    pub kind: KernelKind,
    pub classes: usize,
    /// [M, D] inducing inputs in feature space
    pub z: Tensor,
    /// [M, C] whitened variational means, one column per class
    pub vmean: Tensor,
    /// per class: [M, M] strictly-lower free entries of L_c (upper+diag unused)
    pub l_strict: Vec<Tensor>,
    /// per class: [M] log-diagonal of L_c
    pub l_logdiag: Vec<Tensor>,
    pub log_sf2: Tensor,
    /// present for the rbf kernel only
    pub log_len: Option<Tensor>,
    pub log_noise: Tensor,
}

impl GpHead {
    pub fn num_inducing(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.z.shape()[1]
    }

    /// Current hyperparameter values as plain floats.
    pub fn kernel_params(&self) -> Result<KernelParams> {
        Ok(KernelParams {
            kind: self.kind,
            log_sf2: self.log_sf2.item()?,
            log_len: self.log_len.as_ref().map(|t| t.item()).transpose()?,
            log_noise: self.log_noise.item()?,
        })
    }

    /// Canonical (name, tensor) listing; checkpointing and the optimizer both
    /// rely on this order being stable.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("gp.z".into(), &self.z),
            ("gp.vmean".into(), &self.vmean),
        ];
        for (c, t) in self.l_strict.iter().enumerate() {
            out.push((format!("gp.l_strict.{}", c), t));
        }
        for (c, t) in self.l_logdiag.iter().enumerate() {
            out.push((format!("gp.l_logdiag.{}", c), t));
        }
        out.push(("gp.log_sf2".into(), &self.log_sf2));
        if let Some(ll) = &self.log_len {
            out.push(("gp.log_len".into(), ll));
        }
        out.push(("gp.log_noise".into(), &self.log_noise));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("gp.z".into(), &mut self.z),
            ("gp.vmean".into(), &mut self.vmean),
        ];
        for (c, t) in self.l_strict.iter_mut().enumerate() {
            out.push((format!("gp.l_strict.{}", c), t));
        }
        for (c, t) in self.l_logdiag.iter_mut().enumerate() {
            out.push((format!("gp.l_logdiag.{}", c), t));
        }
        out.push(("gp.log_sf2".into(), &mut self.log_sf2));
        if let Some(ll) = &mut self.log_len {
            out.push(("gp.log_len".into(), ll));
        }
        out.push(("gp.log_noise".into(), &mut self.log_noise));
        out
    }

    /// Bind all head parameters onto `g`, as trainable vars or frozen
    /// constants. Var order matches `named_params`.
    pub fn bind(&self, g: &Graph, trainable: bool) -> Result<GpVars> {
        let lift = |t: &Tensor| -> Result<Var> {
            if trainable {
                g.var(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        Ok(GpVars {
            kind: self.kind,
            classes: self.classes,
            z: lift(&self.z)?,
            vmean: lift(&self.vmean)?,
            l_strict: self.l_strict.iter().map(&lift).collect::<Result<Vec<_>>>()?,
            l_logdiag: self.l_logdiag.iter().map(&lift).collect::<Result<Vec<_>>>()?,
            log_sf2: lift(&self.log_sf2)?,
            log_len: self.log_len.as_ref().map(&lift).transpose()?,
            log_noise: lift(&self.log_noise)?,
        })
    }
}

/// Initialize a GP head from a sample of training features.
///
/// Inducing inputs are M distinct feature rows (tiny seeded perturbations are
/// used if the sample has fewer than M distinct rows); the rbf lengthscale is
/// the median pairwise distance over at most 1024 rows (falling back to 1 when
/// the median is zero); σ_f² = 1, σ_n² = 1e-3, m = 0 and L = I so the
/// variational posterior starts at the whitened prior.
pub fn init_gp_head<R: Rng>(
    kind: KernelKind,
    classes: usize,
    num_inducing: usize,
    feats: &Tensor,
    rng: &mut R,
) -> Result<GpHead> {
    if feats.rank() != 2 || feats.shape()[0] == 0 {
        return Err(Error::shape("init_gp_head", "need a non-empty [n, d] feature matrix"));
    }
    let (n, d) = (feats.shape()[0], feats.shape()[1]);
    let m = num_inducing;
    if m == 0 || classes == 0 {
        return Err(Error::InvalidArg("init_gp_head: need at least one inducing point and one class".into()));
    }
    if n < m {
        return Err(Error::InvalidArg(format!(
            "init_gp_head: feature sample has {} rows but {} inducing points were requested",
            n, m
        )));
    }

    let row = |i: usize| -> &[f64] { &feats.data()[i * d..(i + 1) * d] };

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut z_rows: Vec<Vec<f64>> = Vec::with_capacity(m);
    for &i in &order {
        if z_rows.len() == m {
            break;
        }
        let r = row(i);
        if !z_rows.iter().any(|zr| zr.as_slice() == r) {
            z_rows.push(r.to_vec());
        }
    }
    // not enough distinct rows: reuse rows with a tiny jitter so Z stays distinct
    while z_rows.len() < m {
        let base = row(order[z_rows.len() % n]);
        let perturbed: Vec<f64> = base.iter().map(|&v| v + 1e-3 * (rng.gen::<f64>() - 0.5)).collect();
        z_rows.push(perturbed);
    }
    let mut z = Vec::with_capacity(m * d);
    for r in &z_rows {
        z.extend_from_slice(r);
    }

    let log_len = match kind {
        KernelKind::Rbf => {
            let cap = n.min(MEDIAN_HEURISTIC_CAP);
            let mut dists = Vec::with_capacity(cap * (cap.saturating_sub(1)) / 2);
            for i in 0..cap {
                for j in (i + 1)..cap {
                    let (ri, rj) = (row(i), row(j));
                    let mut d2 = 0.0;
                    for t in 0..d {
                        let diff = ri[t] - rj[t];
                        d2 += diff * diff;
                    }
                    dists.push(d2.sqrt());
                }
            }
            let med = if dists.is_empty() {
                1.0
            } else {
                dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let k = dists.len();
                if k % 2 == 1 {
                    dists[k / 2]
                } else {
                    0.5 * (dists[k / 2 - 1] + dists[k / 2])
                }
            };
            let med = if med > 0.0 { med } else { 1.0 };
            Some(Tensor::scalar(med.ln()))
        }
        KernelKind::Linear => None,
    };

    Ok(GpHead {
        kind,
        classes,
        z: Tensor::new(&[m, d], z)?,
        vmean: Tensor::zeros(&[m, classes]),
        l_strict: (0..classes).map(|_| Tensor::zeros(&[m, m])).collect(),
        l_logdiag: (0..classes).map(|_| Tensor::zeros(&[m])).collect(),
        log_sf2: Tensor::scalar(0.0),
        log_len,
        log_noise: Tensor::scalar(DEFAULT_NOISE.ln()),
    })
}

/// Graph-bound GP head parameters.
pub struct GpVars {
    pub kind: KernelKind,
    pub classes: usize,
    pub z: Var,
    pub vmean: Var,
    pub l_strict: Vec<Var>,
    pub l_logdiag: Vec<Var>,
    pub log_sf2: Var,
    pub log_len: Option<Var>,
    pub log_noise: Var,
}

impl GpVars {
    /// Vars in the same canonical order as `GpHead::named_params`.
    pub fn var_list(&self) -> Vec<Var> {
        let mut out = vec![self.z.clone(), self.vmean.clone()];
        out.extend(self.l_strict.iter().cloned());
        out.extend(self.l_logdiag.iter().cloned());
        out.push(self.log_sf2.clone());
        if let Some(ll) = &self.log_len {
            out.push(ll.clone());
        }
        out.push(self.log_noise.clone());
        out
    }

    fn num_inducing(&self) -> usize {
        self.z.shape()[0]
    }

    /// 0.5 / ℓ² as a scalar var (rbf only).
    fn inv_two_len2(&self) -> Result<Var> {
        let ll = self.log_len.as_ref().ok_or_else(|| {
            Error::InvalidArg("gp: rbf kernel needs a lengthscale".into())
        })?;
        ll.affine(-2.0, 0.5f64.ln())?.exp()
    }

    /// Cross covariance K_ab (no noise term), a: [na, d], b: [nb, d] → [na, nb].
    fn cross_kernel(&self, a: &Var, b: &Var) -> Result<Var> {
        match self.kind {
            KernelKind::Rbf => {
                let na = a.shape()[0];
                let nb = b.shape()[0];
                let a2 = a.square()?.sum(Some(1))?.reshape(&[na, 1])?;
                let b2 = b.square()?.sum(Some(1))?.reshape(&[1, nb])?;
                let ab = a.matmul(&b.t()?)?;
                let d2 = a2.add(&b2)?.sub(&ab.affine(2.0, 0.0)?)?;
                // exp(log σ_f² − d²/(2ℓ²)); fp noise can make d² slightly
                // negative for coincident points, which exp absorbs harmlessly
                self.log_sf2.sub(&d2.mul(&self.inv_two_len2()?)?)?.exp()
            }
            KernelKind::Linear => a.matmul(&b.t()?)?.mul(&self.log_sf2.exp()?),
        }
    }

    /// Diagonal of the self-covariance at x (noise included), x: [b, d] → [b].
    fn diag_self_kernel(&self, x: &Var, g: &Graph) -> Result<Var> {
        let b = x.shape()[0];
        let ones = g.constant(Tensor::full(&[b], 1.0))?;
        let noise = self.log_noise.exp()?;
        match self.kind {
            KernelKind::Rbf => ones.mul(&self.log_sf2.exp()?.add(&noise)?),
            KernelKind::Linear => {
                let x2 = x.square()?.sum(Some(1))?;
                x2.mul(&self.log_sf2.exp()?)?.add(&ones.mul(&noise)?)
            }
        }
    }

    /// Symmetrized inducing gram K_zz + σ_n²I + jitter·I.
    fn gram_kernel(&self, g: &Graph, jitter: f64) -> Result<Var> {
        let m = self.num_inducing();
        let raw = self.cross_kernel(&self.z, &self.z)?;
        let sym = raw.add(&raw.t()?)?.affine(0.5, 0.0)?;
        let eye = g.constant(Tensor::eye(m))?;
        let noisy_eye = eye.mul(&self.log_noise.exp()?)?;
        let jitter_eye = g.constant(Tensor::eye(m).map(|v| v * jitter))?;
        sym.add(&noisy_eye)?.add(&jitter_eye)
    }

    /// Full per-class factors L_c = strict_lower(P_c) + diag(exp(logdiag_c)).
    pub fn build_l_fulls(&self, g: &Graph) -> Result<Vec<Var>> {
        let m = self.num_inducing();
        let mut strict = Tensor::zeros(&[m, m]);
        for i in 0..m {
            for j in 0..i {
                strict.data_mut()[i * m + j] = 1.0;
            }
        }
        let smask = g.constant(strict)?;
        let mut out = Vec::with_capacity(self.classes);
        for c in 0..self.classes {
            let lower = self.l_strict[c].mul(&smask)?;
            let diag = self.l_logdiag[c].exp()?.diag_embed()?;
            out.push(lower.add(&diag)?);
        }
        Ok(out)
    }

    /// Pick the smallest jitter from a doubling ladder that makes the current
    /// (plain-valued) K_zz + σ_n²I factorizable. The choice is data-dependent
    /// but constant within one graph build, so gradients are unaffected.
    fn choose_jitter(&self) -> Result<f64> {
        let z = self.z.value();
        let m = z.shape()[0];
        let params = KernelParams {
            kind: self.kind,
            log_sf2: self.log_sf2.value().item()?,
            log_len: self.log_len.as_ref().map(|v| v.value().item()).transpose()?,
            log_noise: self.log_noise.value().item()?,
        };
        let kzz = kernel_matrix(&params, &z, &z, true)?;
        let mut jitter = JITTER_START;
        loop {
            let mut trial = kzz.data().to_vec();
            for i in 0..m {
                trial[i * m + i] += jitter;
            }
            match cholesky_factor(&trial, m) {
                Ok(_) => return Ok(jitter),
                Err(_) if jitter < JITTER_MAX => jitter *= 2.0,
                Err(Error::NotPosDef { pivot, .. }) => {
                    return Err(Error::NotPosDef { pivot, jitter })
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Per-class marginal means and variances of the latent process at
    /// `feats` [B, D]: returns (μ [B, C], v [B, C]).
    pub fn marginals(&self, g: &Graph, feats: &Var) -> Result<(Var, Var)> {
        let jitter = self.choose_jitter()?;
        let kzz = self.gram_kernel(g, jitter)?;
        let l_zz = kzz.cholesky()?;
        let kzx = self.cross_kernel(&self.z, feats)?;
        let a = l_zz.tri_solve(&kzx, false)?;

        let mu = a.t()?.matmul(&self.vmean)?;

        let kxx = self.diag_self_kernel(feats, g)?;
        let nystrom = a.square()?.sum(Some(0))?;
        let base = kxx.sub(&nystrom)?;

        let l_fulls = self.build_l_fulls(g)?;
        let mut var_cols = Vec::with_capacity(self.classes);
        for l_c in &l_fulls {
            let lta = l_c.t()?.matmul(&a)?;
            let extra = lta.square()?.sum(Some(0))?;
            var_cols.push(base.add(&extra)?);
        }
        let var = g.stack_cols(&var_cols)?;
        Ok((mu, var))
    }

    /// KL(q(v) ‖ N(0, I)) summed over classes, as a scalar var.
    pub fn kl(&self, g: &Graph) -> Result<Var> {
        let m = self.num_inducing() as f64;
        let l_fulls = self.build_l_fulls(g)?;
        let mut total: Option<Var> = None;
        for c in 0..self.classes {
            let trace = l_fulls[c].square()?.sum(None)?;
            let mc = self.vmean.select_cols(&[c])?;
            let mtm = mc.square()?.sum(None)?;
            // log|S_c| = 2 Σ log diag(L_c), available exactly from the params
            let logdet = self.l_logdiag[c].sum(None)?.affine(2.0, 0.0)?;
            let kl_c = trace.add(&mtm)?.sub(&logdet)?.affine(0.5, -0.5 * m)?;
            total = Some(match total {
                None => kl_c,
                Some(t) => t.add(&kl_c)?,
            });
        }
        total.ok_or_else(|| Error::InvalidArg("gp: zero classes".into()))
    }
}
