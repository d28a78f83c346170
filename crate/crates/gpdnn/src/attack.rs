//! Non-targeted adversarial attacks: the fast gradient-sign method and an
//! L2 optimization attack with a tanh box constraint and a line search over
//! the trade-off constant. Both attack any head — the gradient runs through
//! the full stack, quadrature included — and both are deterministic.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::argmax_row;
use crate::graph::Graph;
use crate::nn::Model;
use crate::tensor::Tensor;
use crate::train::Adam;

#[derive(Debug, Clone, Copy)]
pub struct FgsmConfig {
    /// signed step size in input units; the perturbation is `eps * sign(grad)`
    pub eps: f64,
    /// inclusive data bounds; the perturbed input is clipped to them
    pub bounds: (f64, f64),
}

#[derive(Debug, Clone, Copy)]
pub struct CwConfig {
    /// line-search rounds over the constant c
    pub search_steps: usize,
    /// initial c
    pub c0: f64,
    /// optimizer iterations per round
    pub iters: usize,
    /// optimizer learning rate (on the tanh-space variable)
    pub lr: f64,
    /// confidence margin: the attack pushes until f <= -kappa
    pub kappa: f64,
    pub bounds: (f64, f64),
}

impl Default for CwConfig {
    fn default() -> Self {
        CwConfig { search_steps: 9, c0: 1e-3, iters: 1000, lr: 1e-2, kappa: 0.0, bounds: (-1.0, 1.0) }
    }
}

/// Outcome of one attack on one image.
#[derive(Debug, Clone)]
pub struct AttackResult {
    /// the adversarial input (the clean input when a CW attack fails)
    pub adv: Tensor,
    /// true iff the attacked model's prediction on `adv` differs from the label
    pub success: bool,
    /// L2 perturbation norm; infinite when a CW attack fails
    pub l2: f64,
    pub true_label: usize,
    pub clean_pred: usize,
    pub adv_pred: usize,
    pub clean_probs: Vec<f64>,
    pub adv_probs: Vec<f64>,
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_inputs(model: &Model, xs: &Tensor, ys: &[usize], bounds: (f64, f64)) -> Result<()> {
    if bounds.0 >= bounds.1 {
        return Err(Error::InvalidArg(format!("bounds ({}, {}) are not an interval", bounds.0, bounds.1)));
    }
    if xs.rank() != 2 {
        return Err(Error::shape("attack", "inputs must be [batch, in_dim]"));
    }
    if xs.shape()[0] != ys.len() {
        return Err(Error::shape("attack", "one label per input row"));
    }
    let c = model.classes();
    if let Some(&bad) = ys.iter().find(|&&y| y >= c) {
        return Err(Error::InvalidArg(format!("label {} out of range [0,{})", bad, c)));
    }
    for &v in xs.data() {
        if v < bounds.0 || v > bounds.1 {
            return Err(Error::InvalidArg(format!(
                "input value {} outside bounds [{}, {}]",
                v, bounds.0, bounds.1
            )));
        }
    }
    Ok(())
}

/// Pseudo-logits of a probability row: log p, defined up to an additive
/// constant — only differences matter to the attack objective. For a softmax
/// head this recovers the logits up to that constant; for the robustmax head
/// it is what the pre-softmax difference would have been.
pub fn pseudo_logits(probs: &[f64]) -> Result<Vec<f64>> {
    probs
        .iter()
        .map(|&p| {
            if p > 0.0 {
                Ok(p.ln())
            } else {
                Err(Error::Numerical(format!("pseudo_logits: probability {} not positive", p)))
            }
        })
        .collect()
}

/// Gradient-sign adversarial examples for a whole batch: one backward pass
/// computes every input gradient, then `x' = clip(x + eps * sign(grad))`.
/// Returns just the perturbed batch (cross-model scoring needs nothing else).
pub fn fgsm_examples(model: &Model, xs: &Tensor, ys: &[usize], cfg: &FgsmConfig) -> Result<Tensor> {
    check_inputs(model, xs, ys, cfg.bounds)?;
    if !cfg.eps.is_finite() {
        return Err(Error::InvalidArg("eps must be finite".into()));
    }
    if cfg.eps == 0.0 {
        return Ok(xs.clone());
    }
    let g = Graph::new();
    let bound = model.bind(&g, false)?;
    let xv = g.var(xs.clone())?;
    let feats = bound.features(&g, &xv, None)?;
    let lp = bound.log_probs(&g, &feats)?;
    let nll = lp.gather_rows(ys)?.sum(None)?.affine(-1.0, 0.0)?;
    let grads = g.backward(&nll)?;
    let gx = grads
        .wrt(&xv)
        .ok_or_else(|| Error::Numerical("fgsm: no gradient reached the input".into()))?;
    let (lo, hi) = cfg.bounds;
    let data: Vec<f64> = xs
        .data()
        .iter()
        .zip(gx.data())
        .map(|(&x, &gv)| (x + cfg.eps * sign0(gv)).clamp(lo, hi))
        .collect();
    Tensor::new(xs.shape(), data)
}

/// FGSM over a batch with full per-image bookkeeping.
pub fn fgsm_batch(
    model: &Model,
    xs: &Tensor,
    ys: &[usize],
    cfg: &FgsmConfig,
) -> Result<Vec<AttackResult>> {
    let adv = fgsm_examples(model, xs, ys, cfg)?;
    let clean_lp = model.predict_log_probs(xs)?;
    let adv_lp = model.predict_log_probs(&adv)?;
    let (n, d) = (xs.shape()[0], xs.shape()[1]);
    let c = model.classes();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let clean_row = &clean_lp.data()[i * c..(i + 1) * c];
        let adv_row = &adv_lp.data()[i * c..(i + 1) * c];
        let adv_x = Tensor::new(&[d], adv.data()[i * d..(i + 1) * d].to_vec())?;
        let l2 = adv_x
            .data()
            .iter()
            .zip(&xs.data()[i * d..(i + 1) * d])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let adv_pred = argmax_row(adv_row);
        out.push(AttackResult {
            adv: adv_x,
            success: adv_pred != ys[i],
            l2,
            true_label: ys[i],
            clean_pred: argmax_row(clean_row),
            adv_pred,
            clean_probs: clean_row.iter().map(|&v| v.exp()).collect(),
            adv_probs: adv_row.iter().map(|&v| v.exp()).collect(),
        });
    }
    Ok(out)
}

/// Single-image FGSM.
pub fn fgsm(model: &Model, x: &Tensor, y: usize, cfg: &FgsmConfig) -> Result<AttackResult> {
    let xs = x.reshaped(&[1, x.numel()])?;
    Ok(fgsm_batch(model, &xs, &[y], cfg)?.remove(0))
}

fn atanh_clamped(t: f64) -> f64 {
    t.clamp(-(1.0 - 1e-6), 1.0 - 1e-6).atanh()
}

fn tanh_box(w: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    w.iter().map(|&v| lo + (hi - lo) * (v.tanh() + 1.0) / 2.0).collect()
}

/// The L2 optimization attack, batched over images. Each image carries its
/// own trade-off constant c through the line search; the inner optimization
/// of all images runs jointly (their objectives are independent, so the
/// gradients never mix). Preconditions: every clean input must be classified
/// correctly — the caller filters, and a violation is an error.
///
/// Per round: minimize `||x'-x||^2 + c * max(f(x'), -kappa)` over the
/// tanh-space variable for `iters` Adam steps, where `f = Z_label - max
/// other Z` on pseudo-logits; success at c bisects downward, failure raises
/// c (a tenfold jump until a success brackets it, so a handful of rounds
/// covers several decades from a bad initial guess). A numerical failure inside a
/// round counts as that round failing, not as an error. The best (smallest
/// perturbation) success across rounds wins; with no success at all the
/// result carries the clean image and infinite distance.
pub fn cw_l2_batch(
    model: &Model,
    xs: &Tensor,
    ys: &[usize],
    cfg: &CwConfig,
) -> Result<Vec<AttackResult>> {
    check_inputs(model, xs, ys, cfg.bounds)?;
    if cfg.search_steps == 0 || cfg.iters == 0 || cfg.lr <= 0.0 || cfg.c0 <= 0.0 {
        return Err(Error::InvalidArg("cw: steps, iterations, rates and c0 must be positive".into()));
    }
    let (n, d) = (xs.shape()[0], xs.shape()[1]);
    let c_classes = model.classes();
    let (lo, hi) = cfg.bounds;

    let clean_lp = model.predict_log_probs(xs)?;
    let mut clean_preds = Vec::with_capacity(n);
    for i in 0..n {
        let row = &clean_lp.data()[i * c_classes..(i + 1) * c_classes];
        let pred = argmax_row(row);
        if pred != ys[i] {
            return Err(Error::InvalidArg(format!(
                "cw: input {} is already misclassified ({} vs label {}); filter inputs first",
                i, pred, ys[i]
            )));
        }
        clean_preds.push(pred);
    }

    // tanh-space start: the exact preimage of x, clamped away from the poles
    let w0: Vec<f64> = xs
        .data()
        .iter()
        .map(|&x| atanh_clamped(2.0 * (x - lo) / (hi - lo) - 1.0))
        .collect();

    // per-row mask that removes the true class from the runner-up max
    let mut mask = vec![0.0; n * c_classes];
    for (i, &y) in ys.iter().enumerate() {
        mask[i * c_classes + y] = -1e30;
    }
    let mask_t = Tensor::new(&[n, c_classes], mask)?;

    let mut c = vec![cfg.c0; n];
    let mut lower = vec![0.0f64; n];
    let mut upper: Vec<Option<f64>> = vec![None; n];
    let mut best: Vec<Option<(f64, Vec<f64>, usize, Vec<f64>)>> = vec![None; n];

    for _round in 0..cfg.search_steps {
        let c_t = Tensor::new(&[n], c.clone())?;
        let mut w = Tensor::new(&[n, d], w0.clone())?;
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        let round_ok = (|| -> Result<()> {
            for _ in 0..cfg.iters {
                let g = Graph::new();
                let bound = model.bind(&g, false)?;
                let wv = g.var(w.clone())?;
                let half = (hi - lo) / 2.0;
                let xadv = wv.tanh()?.affine(half, lo + half)?;
                let diff = xadv.sub(&g.constant(xs.clone())?)?;
                let dist = diff.square()?.sum(None)?;
                let feats = bound.features(&g, &xadv, None)?;
                let lp = bound.log_probs(&g, &feats)?;
                let zl = lp.gather_rows(ys)?;
                let other = lp.add(&g.constant(mask_t.clone())?)?.max(Some(1))?;
                let f = zl.sub(&other)?;
                let hinge = f.affine(1.0, cfg.kappa)?.relu()?.affine(1.0, -cfg.kappa)?;
                let obj = dist.add(&g.constant(c_t.clone())?.mul(&hinge)?.sum(None)?)?;
                let grads = g.backward(&obj)?;
                let gw = grads.wrt_or_zeros(&wv);
                adam.step(&mut [&mut w], &[gw], &[cfg.lr])?;
            }
            Ok(())
        })();

        // score the round; a numerical failure counts as no success this round
        let round_scores: Option<(Vec<f64>, Tensor)> = match round_ok {
            Err(_) => None,
            Ok(()) => {
                let xadv = Tensor::new(&[n, d], tanh_box(w.data(), lo, hi))?;
                match model.predict_log_probs(&xadv) {
                    Err(_) => None,
                    Ok(lp) => Some((lp.into_data(), xadv)),
                }
            }
        };

        for i in 0..n {
            let success = if let Some((lp, xadv)) = &round_scores {
                let row = &lp[i * c_classes..(i + 1) * c_classes];
                let pred = argmax_row(row);
                if pred != ys[i] {
                    let advi = &xadv.data()[i * d..(i + 1) * d];
                    let l2 = advi
                        .iter()
                        .zip(&xs.data()[i * d..(i + 1) * d])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    if best[i].as_ref().is_none_or(|(b, _, _, _)| l2 < *b) {
                        best[i] = Some((
                            l2,
                            advi.to_vec(),
                            pred,
                            row.iter().map(|&v| v.exp()).collect(),
                        ));
                    }
                    true
                } else {
                    false
                }
            } else {
                false
            };
            if success {
                upper[i] = Some(c[i]);
                c[i] = (lower[i] + c[i]) / 2.0;
            } else {
                lower[i] = c[i];
                c[i] = match upper[i] {
                    Some(u) => (lower[i] + u) / 2.0,
                    None => c[i] * 10.0,
                };
            }
        }
    }

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let clean_row = &clean_lp.data()[i * c_classes..(i + 1) * c_classes];
        let clean_probs: Vec<f64> = clean_row.iter().map(|&v| v.exp()).collect();
        match best[i].take() {
            Some((l2, adv, pred, probs)) => out.push(AttackResult {
                adv: Tensor::new(&[d], adv)?,
                success: true,
                l2,
                true_label: ys[i],
                clean_pred: clean_preds[i],
                adv_pred: pred,
                clean_probs,
                adv_probs: probs,
            }),
            None => out.push(AttackResult {
                adv: Tensor::new(&[d], xs.data()[i * d..(i + 1) * d].to_vec())?,
                success: false,
                l2: f64::INFINITY,
                true_label: ys[i],
                clean_pred: clean_preds[i],
                adv_pred: clean_preds[i],
                clean_probs: clean_probs.clone(),
                adv_probs: clean_probs,
            }),
        }
    }
    Ok(out)
}

/// Single-image L2 optimization attack.
pub fn cw_l2(model: &Model, x: &Tensor, y: usize, cfg: &CwConfig) -> Result<AttackResult> {
    let xs = x.reshaped(&[1, x.numel()])?;
    Ok(cw_l2_batch(model, &xs, &[y], cfg)?.remove(0))
}

/// Serialize per-image attack results as
/// `index,true_label,clean_pred,adv_pred,success,l2_dist` CSV.
pub fn attack_csv(results: &[AttackResult]) -> String {
    let mut out = String::from("index,true_label,clean_pred,adv_pred,success,l2_dist\n");
    for (i, r) in results.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i, r.true_label, r.clean_pred, r.adv_pred, r.success, r.l2
        ));
    }
    out
}

/// Bounds for attacking items of a dataset (its declared value range).
pub fn dataset_bounds(ds: &Dataset) -> (f64, f64) {
    ds.range
}
