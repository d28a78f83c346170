//! End-to-end optimization: loss assembly (cross-entropy or minibatch-scaled
//! negative evidence bound), Adam, the training loop with validation-monitored
//! checkpointing, and the softmax-to-GP head switch.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::gp::KernelKind;
use crate::graph::{Graph, Var};
use crate::nn::{BetaSpec, BoundHead, BoundModel, Model, DEFAULT_QUAD_POINTS};
use crate::robustmax::variational_expectation;
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use std::io::Write;
use std::path::Path;

/// Swap the softmax head for a GP head partway through training.
#[derive(Debug, Clone)]
pub struct HeadSwitch {
    /// switch happens just before this optimization step (1-based)
    pub at_iter: usize,
    pub kernel: KernelKind,
    pub inducing: usize,
    pub beta: BetaSpec,
    pub quad_points: usize,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    /// separate rate for GP-head parameters; defaults to `lr`
    pub lr_gp: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub seed: u64,
    /// validation is scored every this many steps (and on the last step)
    pub val_interval: usize,
    /// dataset size N for evidence-bound scaling; defaults to the training
    /// set size, which is what N means — override only for careful subsetting
    pub dataset_n: Option<usize>,
    pub switch: Option<HeadSwitch>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: 1000,
            batch: 128,
            lr: 1e-3,
            lr_gp: None,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            seed: 0,
            val_interval: 50,
            dataset_n: None,
            switch: None,
        }
    }
}

/// One logged point of the training trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    /// minibatch training loss at this step
    pub loss: f64,
    pub val_error: f64,
    pub val_ll: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// the checkpoint with the lowest validation error (ties broken by
    /// higher validation log-likelihood, then by the earlier iteration)
    pub model: Model,
    pub trace: Vec<TraceRow>,
    pub best_iter: usize,
    pub best_val_error: f64,
    pub best_val_ll: f64,
}

/// Training loss on a bound model, as a graph node.
///
/// Softmax heads: mean cross-entropy over the batch. GP heads: the negative
/// evidence bound `KL - (N/|batch|) * sum(variational expectation)`, whose
/// data term is an unbiased estimate of the full-dataset sum.
pub fn loss_var(
    g: &Graph,
    bound: &BoundModel,
    x: &Var,
    y: &[usize],
    dataset_n: usize,
    rng: Option<&mut ChaCha20Rng>,
) -> Result<Var> {
    let b = x.shape()[0];
    if b == 0 || y.is_empty() {
        return Err(Error::Data("loss: empty batch".into()));
    }
    if y.len() != b {
        return Err(Error::Data(format!("loss: {} inputs but {} labels", b, y.len())));
    }
    let feats = bound.features(g, x, rng)?;
    match bound.head() {
        BoundHead::Softmax { .. } => {
            let logp = bound.log_probs(g, &feats)?;
            logp.gather_rows(y)?.mean(None)?.affine(-1.0, 0.0)
        }
        BoundHead::Gp { vars, beta, quad_points, initialized } => {
            if !initialized {
                return Err(Error::InvalidArg(
                    "loss: GP head not yet initialized from data".into(),
                ));
            }
            let (mu, var) = vars.marginals(g, &feats)?;
            let p = crate::robustmax::argmax_probs(&mu, &var, *quad_points)?;
            let ve = variational_expectation(g, &p, beta, y)?;
            let scale = dataset_n as f64 / b as f64;
            let data_term = ve.sum(None)?.affine(scale, 0.0)?;
            vars.kl(g)?.sub(&data_term)
        }
    }
}

/// Evaluation-mode training loss (no dropout) for a labeled batch.
pub fn loss(model: &Model, x: &Tensor, y: &[usize], dataset_n: usize) -> Result<f64> {
    let g = Graph::new();
    let bound = model.bind(&g, false)?;
    let xv = g.constant(x.clone())?;
    loss_var(&g, &bound, &xv, y, dataset_n, None)?.value().item()
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Bias-corrected Adam. State is positional: slot i tracks the i-th tensor
/// passed to `step`, so the caller must keep parameter order stable (and
/// `reset` when the parameter set changes, e.g. after a head switch).
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Adam {
        Adam { beta1, beta2, eps, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn reset(&mut self) {
        self.t = 0;
        self.m.clear();
        self.v.clear();
    }

    /// One update over all parameter tensors with per-tensor learning rates.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        lrs: &[f64],
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != lrs.len() {
            return Err(Error::InvalidArg(format!(
                "adam: {} params, {} grads, {} rates",
                params.len(),
                grads.len(),
                lrs.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::InvalidArg("adam: parameter count changed; reset first".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, gt), (lr, slot)) in
            params.iter_mut().zip(grads).zip(lrs.iter().zip(0..))
        {
            if p.shape() != gt.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("param {:?} vs grad {:?} in slot {}", p.shape(), gt.shape(), slot),
                ));
            }
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            let pd = p.data_mut();
            for (i, &gi) in gt.data().iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                pd[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

fn feature_sample(model: &Model, ds: &Dataset, want: usize, rng: &mut ChaCha20Rng) -> Result<Tensor> {
    let k = want.min(ds.n());
    let mut idx: Vec<usize> = (0..ds.n()).collect();
    idx.shuffle(rng);
    idx.truncate(k);
    let (x, _) = ds.batch(&idx)?;
    model.extract_features(&x)
}

fn group_rates(model: &Model, cfg: &TrainConfig) -> Vec<f64> {
    model
        .named_params()
        .iter()
        .map(|(n, _)| if n.starts_with("gp.") { cfg.lr_gp.unwrap_or(cfg.lr) } else { cfg.lr })
        .collect()
}

/// Run the optimization loop. Validation is scored every `val_interval`
/// steps and the lowest-validation-error snapshot is returned. Bitwise
/// deterministic in (model, data, config).
pub fn train(model: &Model, train_ds: &Dataset, val_ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.batch == 0 || cfg.batch > train_ds.n() {
        return Err(Error::InvalidArg(format!(
            "batch size {} outside [1, {}]",
            cfg.batch,
            train_ds.n()
        )));
    }
    if cfg.lr <= 0.0 || cfg.lr_gp.is_some_and(|r| r <= 0.0) {
        return Err(Error::InvalidArg("learning rates must be positive".into()));
    }
    if cfg.val_interval == 0 {
        return Err(Error::InvalidArg("validation interval must be positive".into()));
    }
    if val_ds.n() == 0 {
        return Err(Error::Data("train: empty validation set".into()));
    }
    if let Some(sw) = &cfg.switch {
        if sw.at_iter == 0 || sw.at_iter > cfg.iters {
            return Err(Error::InvalidArg(format!(
                "head switch at iteration {} outside [1, {}]",
                sw.at_iter, cfg.iters
            )));
        }
    }

    let mut model = model.clone();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);

    if model.gp_needs_init() {
        let m_needed = model.gp_inducing().unwrap_or(0);
        let feats = feature_sample(&model, train_ds, 512.max(m_needed), &mut rng)?;
        model.install_gp_head(&feats, &mut rng)?;
    }

    let n_total = cfg.dataset_n.unwrap_or(train_ds.n());
    let eval_batch = 256;

    if cfg.iters == 0 {
        let rep = evaluate(&model, val_ds, eval_batch)?;
        return Ok(TrainOutcome {
            model,
            trace: Vec::new(),
            best_iter: 0,
            best_val_error: rep.error,
            best_val_ll: rep.mean_ll,
        });
    }

    let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.eps_adam);
    let mut lrs = group_rates(&model, cfg);
    let mut perm: Vec<usize> = (0..train_ds.n()).collect();
    let mut cursor = perm.len(); // forces a shuffle before the first batch
    let mut trace = Vec::new();
    let mut best: Option<(f64, f64, usize, Model)> = None;

    for iter in 1..=cfg.iters {
        if let Some(sw) = &cfg.switch {
            if sw.at_iter == iter {
                let feats = feature_sample(&model, train_ds, 512.max(sw.inducing), &mut rng)?;
                model.switch_to_gp_head(
                    sw.kernel,
                    sw.inducing,
                    sw.beta.clone(),
                    sw.quad_points,
                    &feats,
                    &mut rng,
                )?;
                adam.reset();
                lrs = group_rates(&model, cfg);
                best = None; // snapshots of the old architecture no longer apply
            }
        }

        if cursor + cfg.batch > perm.len() {
            perm.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &perm[cursor..cursor + cfg.batch];
        cursor += cfg.batch;
        let (bx, by) = train_ds.batch(idx)?;

        let step = (|| -> Result<f64> {
            let g = Graph::new();
            let bound = model.bind(&g, true)?;
            let xv = g.constant(bx)?;
            let loss = loss_var(&g, &bound, &xv, &by, n_total, Some(&mut rng))?;
            let loss_val = loss.value().item()?;
            if !loss_val.is_finite() {
                return Err(Error::Numerical("loss is not finite".into()));
            }
            let grads = g.backward(&loss)?;
            let grad_tensors: Vec<Tensor> =
                bound.param_vars.iter().map(|v| grads.wrt_or_zeros(v)).collect();
            let mut named = model.named_params_mut();
            let mut params: Vec<&mut Tensor> = named.iter_mut().map(|(_, t)| &mut **t).collect();
            adam.step(&mut params, &grad_tensors, &lrs)?;
            Ok(loss_val)
        })();
        let loss_val =
            step.map_err(|e| Error::Numerical(format!("training aborted at iteration {}: {}", iter, e)))?;

        if iter % cfg.val_interval == 0 || iter == cfg.iters {
            let rep = evaluate(&model, val_ds, eval_batch)?;
            trace.push(TraceRow { iter, loss: loss_val, val_error: rep.error, val_ll: rep.mean_ll });
            let better = match &best {
                None => true,
                Some((be, bl, _, _)) => {
                    rep.error < *be || (rep.error == *be && rep.mean_ll > *bl)
                }
            };
            if better {
                best = Some((rep.error, rep.mean_ll, iter, model.clone()));
            }
        }
    }

    let (best_val_error, best_val_ll, best_iter, best_model) =
        best.expect("final iteration always evaluates");
    Ok(TrainOutcome { model: best_model, trace, best_iter, best_val_error, best_val_ll })
}

/// Replace a trained softmax model's head with a freshly initialized GP head
/// (fixed β = 1e-3), keeping the extractor untouched. `sample_x` supplies
/// the inducing-point candidates through the extractor.
pub fn switch_head(
    model: &Model,
    inducing: usize,
    kernel: KernelKind,
    sample_x: &Tensor,
    seed: u64,
) -> Result<Model> {
    let mut out = model.clone();
    let feats = out.extract_features(sample_x)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    out.switch_to_gp_head(
        kernel,
        inducing,
        BetaSpec::Fixed { value: 1e-3 },
        DEFAULT_QUAD_POINTS,
        &feats,
        &mut rng,
    )?;
    Ok(out)
}

/// Write the metric trace as `iter,loss,val_error,val_ll` CSV.
pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut out = String::from("iter,loss,val_error,val_ll\n");
    for r in trace {
        out.push_str(&format!("{},{},{},{}\n", r.iter, r.loss, r.val_error, r.val_ll));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::half_moons;
    use crate::nn::{preset, DataShape, HeadSpec, InitScheme, ModelSpec};

    fn uniform_ten_class_model() -> Model {
        // no extractor layers, zeroed linear head: exactly uniform output
        let spec = ModelSpec {
            name: "uniform".into(),
            input: DataShape::Vector { dim: 3 },
            extractor: vec![],
            d: None,
            relu_after_d: false,
            head: HeadSpec::Softmax { classes: 10 },
            init: InitScheme::TruncNormal,
        };
        let mut model = Model::build(&spec, 0).unwrap();
        for (_, t) in model.named_params_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        model
    }

    #[test]
    fn uniform_cross_entropy_is_log_c() {
        let model = uniform_ten_class_model();
        let x = Tensor::new(&[4, 3], vec![0.5; 12]).unwrap();
        let l = loss(&model, &x, &[0, 3, 7, 9], 4).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12, "loss {} vs ln 10", l);
    }

    #[test]
    fn evidence_bound_batch_scaling_is_unbiased() {
        // mean of minibatch-scaled losses over a partition equals the
        // full-batch loss exactly (linearity of the data term)
        let ds = half_moons(60, 0.1, 3).unwrap();
        let mut model = Model::build(&preset("halfmoon-gpdnn-rbf").unwrap(), 1).unwrap();
        let feats = model.extract_features(&ds.flat_x()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        model.install_gp_head(&feats, &mut rng).unwrap();

        let full = loss(&model, &ds.flat_x(), &ds.y, 60).unwrap();
        let mut acc = 0.0;
        for b in 0..3 {
            let idx: Vec<usize> = (b * 20..(b + 1) * 20).collect();
            let (bx, by) = ds.batch(&idx).unwrap();
            acc += loss(&model, &bx, &by, 60).unwrap();
        }
        assert!(
            (acc / 3.0 - full).abs() < 1e-9,
            "partition mean {} vs full {}",
            acc / 3.0,
            full
        );
    }

    #[test]
    fn adam_basics() {
        // zero gradient leaves parameters untouched
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        let mut p = Tensor::new(&[2], vec![1.5, -0.5]).unwrap();
        adam.step(&mut [&mut p], &[Tensor::zeros(&[2])], &[0.1]).unwrap();
        assert_eq!(p.data(), &[1.5, -0.5]);

        // first step moves by ~lr in the negative gradient direction,
        // independent of gradient magnitude
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        let mut p = Tensor::new(&[2], vec![0.0, 0.0]).unwrap();
        adam.step(&mut [&mut p], &[Tensor::new(&[2], vec![1e4, -1e-3]).unwrap()], &[0.1]).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-3, "large grad: {}", p.data()[0]);
        assert!((p.data()[1] - 0.1).abs() < 1e-3, "small grad: {}", p.data()[1]);

        // 200 steps on (w-3)^2 from 0 with lr 0.1 converges near 3
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        let mut w = Tensor::new(&[1], vec![0.0]).unwrap();
        for _ in 0..200 {
            let grad = 2.0 * (w.data()[0] - 3.0);
            adam.step(&mut [&mut w], &[Tensor::new(&[1], vec![grad]).unwrap()], &[0.1]).unwrap();
        }
        assert!((w.data()[0] - 3.0).abs() < 0.05, "w = {}", w.data()[0]);
    }

    #[test]
    fn full_batch_steps_mostly_decrease_loss() {
        let ds = half_moons(60, 0.1, 2).unwrap();
        let model = Model::build(&preset("halfmoon-nn").unwrap(), 4).unwrap();
        let mut model = model;
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut prev = f64::INFINITY;
        let mut decreases = 0;
        for _ in 0..50 {
            let g = Graph::new();
            let bound = model.bind(&g, true).unwrap();
            let xv = g.constant(ds.flat_x()).unwrap();
            let l = loss_var(&g, &bound, &xv, &ds.y, ds.n(), Some(&mut rng)).unwrap();
            let lv = l.value().item().unwrap();
            if lv < prev {
                decreases += 1;
            }
            prev = lv;
            let grads = g.backward(&l).unwrap();
            let gt: Vec<Tensor> = bound.param_vars.iter().map(|v| grads.wrt_or_zeros(v)).collect();
            let lrs = vec![1e-3; gt.len()];
            let mut named = model.named_params_mut();
            let mut params: Vec<&mut Tensor> = named.iter_mut().map(|(_, t)| &mut **t).collect();
            adam.step(&mut params, &gt, &lrs).unwrap();
        }
        assert!(decreases >= 45, "only {} of 50 steps decreased the loss", decreases);
    }

    #[test]
    fn training_is_deterministic_and_learns_half_moons() {
        let ds = half_moons(240, 0.1, 7).unwrap();
        let (train_ds, val_ds) = crate::data::split(&ds, 40, 1.0, 7).unwrap();
        let model = Model::build(&preset("halfmoon-nn").unwrap(), 9).unwrap();
        let cfg = TrainConfig {
            iters: 1000,
            batch: 50,
            val_interval: 250,
            seed: 13,
            ..TrainConfig::default()
        };
        let out1 = train(&model, &train_ds, &val_ds, &cfg).unwrap();
        let out2 = train(&model, &train_ds, &val_ds, &cfg).unwrap();
        assert_eq!(out1.trace, out2.trace, "identical traces for identical seeds");
        for ((_, a), (_, b)) in out1.model.named_params().iter().zip(out2.model.named_params().iter())
        {
            assert_eq!(a.data(), b.data(), "bitwise identical parameters");
        }
        let rep = evaluate(&out1.model, &train_ds, 64).unwrap();
        assert!(rep.error <= 0.05, "train error {} after 1000 iterations", rep.error);
        assert_eq!(out1.trace.len(), 4);
        assert!(out1.best_val_error <= out1.trace[0].val_error);
    }

    #[test]
    fn zero_iterations_returns_initial_model() {
        let ds = half_moons(60, 0.1, 1).unwrap();
        let (train_ds, val_ds) = crate::data::split(&ds, 10, 1.0, 1).unwrap();
        let model = Model::build(&preset("halfmoon-nn").unwrap(), 2).unwrap();
        let cfg = TrainConfig { iters: 0, batch: 32, ..TrainConfig::default() };
        let out = train(&model, &train_ds, &val_ds, &cfg).unwrap();
        for ((_, a), (_, b)) in model.named_params().iter().zip(out.model.named_params().iter()) {
            assert_eq!(a.data(), b.data());
        }
        assert!(out.trace.is_empty());
        assert_eq!(out.best_iter, 0);
    }

    #[test]
    fn nan_abort_names_the_iteration() {
        let ds = half_moons(60, 0.1, 1).unwrap();
        let (train_ds, val_ds) = crate::data::split(&ds, 10, 1.0, 1).unwrap();
        let model = Model::build(&preset("halfmoon-nn").unwrap(), 2).unwrap();
        // an absurd learning rate overflows the parameters almost immediately
        let cfg =
            TrainConfig { iters: 20, batch: 32, lr: 1e300, val_interval: 50, ..TrainConfig::default() };
        let err = train(&model, &train_ds, &val_ds, &cfg).unwrap_err().to_string();
        assert!(err.contains("iteration"), "error names the iteration: {}", err);
    }

    #[test]
    fn head_switch_preserves_features_and_keeps_accuracy() {
        let ds = half_moons(300, 0.1, 21).unwrap();
        let (train_ds, val_ds) = crate::data::split(&ds, 50, 1.0, 21).unwrap();
        let model = Model::build(&preset("halfmoon-nn").unwrap(), 3).unwrap();
        let cfg = TrainConfig {
            iters: 500,
            batch: 50,
            val_interval: 100,
            seed: 4,
            ..TrainConfig::default()
        };
        let pre = train(&model, &train_ds, &val_ds, &cfg).unwrap();
        let pre_acc = 1.0 - evaluate(&pre.model, &val_ds, 64).unwrap().error;

        let sample = train_ds.batch(&(0..100).collect::<Vec<_>>()).unwrap().0;
        let feats_before = pre.model.extract_features(&sample).unwrap();
        let switched = switch_head(&pre.model, 20, KernelKind::Rbf, &sample, 99).unwrap();
        let feats_after = switched.extract_features(&sample).unwrap();
        assert_eq!(feats_before.data(), feats_after.data(), "extractor untouched by the switch");

        // fresh variational state: KL to the prior is zero
        let g = Graph::new();
        let bound = switched.bind(&g, false).unwrap();
        match bound.head() {
            BoundHead::Gp { vars, .. } => {
                let kl = vars.kl(&g).unwrap().value().item().unwrap();
                assert!(kl.abs() < 1e-10, "fresh KL = {}", kl);
            }
            _ => panic!("switched model must have a GP head"),
        }

        // brief fine-tuning reaches at least the pre-switch accuracy
        let cfg2 = TrainConfig {
            iters: 500,
            batch: 50,
            val_interval: 100,
            seed: 5,
            ..TrainConfig::default()
        };
        let post = train(&switched, &train_ds, &val_ds, &cfg2).unwrap();
        let post_acc = 1.0 - evaluate(&post.model, &val_ds, 64).unwrap().error;
        assert!(
            post_acc >= pre_acc - 1e-9,
            "post-switch accuracy {} below pre-switch {}",
            post_acc,
            pre_acc
        );
    }

    #[test]
    fn trace_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let rows = vec![
            TraceRow { iter: 50, loss: 0.75, val_error: 0.125, val_ll: -0.5 },
            TraceRow { iter: 100, loss: 0.5, val_error: 0.1, val_ll: -0.25 },
        ];
        write_trace_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "iter,loss,val_error,val_ll\n50,0.75,0.125,-0.5\n100,0.5,0.1,-0.25\n");
    }
}
